#pragma once

// Flat "key = value" configuration. Lines starting with '#' are comments.
// Every key has a documented default; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pcsc/contrast.hpp"
#include "pcsc/encoder.hpp"
#include "pcsc/predictor.hpp"
#include "pcsc/semcluster.hpp"
#include "pcsc/synthetic.hpp"

namespace pcsc {

struct DataConfig {
  SyntheticConfig synthetic;
  std::size_t videos_per_class = 20;
  std::size_t segments = 4;  // L; the last segment is the prediction target
};

struct PredictorConfig {
  std::size_t k_interp = 3;
  double time_scale = 0.5;  // meters per frame of temporal offset in interpolation distances
};

struct OptimConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 8e-4;
  double lr_min = 0.0;
  long warmup_steps = 10;
  long horizon = 0;  // 0: total number of steps
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  std::string out = "runs/default";
};

struct ProbeConfig {
  std::size_t epochs = 300;
  double lr = 0.01;
  double weight_decay = 1e-4;
  std::size_t folds = 2;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  DataConfig data;
  EncoderConfig encoder;
  AutoregressorConfig ar;
  PredictorConfig predictor;
  ContrastConfig contrast;
  LossConfig cluster;
  OptimConfig train;
  ProbeConfig probe;

  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("value '" + v + "' for " + key + " is not a valid number", key);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("value '" + v + "' for " + key + " is not a boolean", key);
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
Field number_field(T TrainConfig::*group, auto member) {
  using V = std::remove_reference_t<decltype((std::declval<T&>().*member))>;
  return {[group, member](TrainConfig& c, const std::string& v) {
            (c.*group).*member = parse_number<V>("", v);
          },
          [group, member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<V>) return format_double((c.*group).*member);
            else return std::to_string((c.*group).*member);
          }};
}

template <class E>
Field enum_field(std::function<E&(TrainConfig&)> ref, std::vector<std::pair<std::string, E>> names) {
  return {[ref, names](TrainConfig& c, const std::string& v) {
            for (const auto& [n, e] : names)
              if (n == v) {
                ref(c) = e;
                return;
              }
            std::string allowed;
            for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : ", ") + n;
            throw ConfigError("value '" + v + "' is not one of: " + allowed, "");
          },
          [ref, names](const TrainConfig& c) {
            const E e = ref(const_cast<TrainConfig&>(c));
            for (const auto& [n, x] : names)
              if (x == e) return n;
            return std::string("?");
          }};
}

inline const std::vector<std::pair<std::string, MotionFamily>>& family_names() {
  static const std::vector<std::pair<std::string, MotionFamily>> n{{"translation", MotionFamily::translation},
                                                                   {"rotation", MotionFamily::rotation},
                                                                   {"articulation", MotionFamily::articulation}};
  return n;
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    auto syn = [](auto member) {
      using V = std::remove_reference_t<decltype((std::declval<SyntheticConfig&>().*member))>;
      return Field{[member](TrainConfig& c, const std::string& v) { c.data.synthetic.*member = parse_number<V>("", v); },
                   [member](const TrainConfig& c) {
                     if constexpr (std::is_floating_point_v<V>) return format_double(c.data.synthetic.*member);
                     else return std::to_string(c.data.synthetic.*member);
                   }};
    };
    m["data.classes"] = syn(&SyntheticConfig::num_classes);
    m["data.points"] = syn(&SyntheticConfig::points);
    m["data.frames"] = syn(&SyntheticConfig::frames);
    m["data.parts"] = syn(&SyntheticConfig::parts);
    m["data.noise"] = syn(&SyntheticConfig::noise);
    m["data.seed"] = syn(&SyntheticConfig::seed);
    m["data.scale_jitter"] = syn(&SyntheticConfig::scale_jitter);
    m["data.heading_jitter"] = syn(&SyntheticConfig::heading_jitter);
    m["data.rate_jitter"] = syn(&SyntheticConfig::rate_jitter);
    m["data.families"] = Field{[](TrainConfig& c, const std::string& v) {
                                 std::vector<MotionFamily> out;
                                 std::stringstream ss(v);
                                 std::string item;
                                 while (std::getline(ss, item, ',')) {
                                   item = trim(item);
                                   bool ok = false;
                                   for (const auto& [n, e] : family_names())
                                     if (n == item) {
                                       out.push_back(e);
                                       ok = true;
                                     }
                                   if (!ok) throw ConfigError("unknown motion family '" + item + "'", "");
                                 }
                                 c.data.synthetic.families = std::move(out);
                               },
                               [](const TrainConfig& c) {
                                 std::string s;
                                 for (auto f : c.data.synthetic.families) s += (s.empty() ? "" : ",") + std::string(to_string(f));
                                 return s;
                               }};
    m["data.videos_per_class"] = number_field(&TrainConfig::data, &DataConfig::videos_per_class);
    m["data.segments"] = number_field(&TrainConfig::data, &DataConfig::segments);

    m["encoder.spatial_radius"] = number_field(&TrainConfig::encoder, &EncoderConfig::spatial_radius);
    m["encoder.temporal_radius"] = number_field(&TrainConfig::encoder, &EncoderConfig::temporal_radius);
    m["encoder.centers"] = number_field(&TrainConfig::encoder, &EncoderConfig::centers);
    m["encoder.ball_k"] = number_field(&TrainConfig::encoder, &EncoderConfig::ball_k);
    m["encoder.hidden"] = number_field(&TrainConfig::encoder, &EncoderConfig::hidden);
    m["encoder.width"] = number_field(&TrainConfig::encoder, &EncoderConfig::width);
    m["encoder.stride"] = number_field(&TrainConfig::encoder, &EncoderConfig::stride);

    m["ar.depth"] = number_field(&TrainConfig::ar, &AutoregressorConfig::depth);
    m["ar.heads"] = number_field(&TrainConfig::ar, &AutoregressorConfig::heads);
    m["ar.feedforward"] = number_field(&TrainConfig::ar, &AutoregressorConfig::feedforward);
    m["ar.causal"] = Field{[](TrainConfig& c, const std::string& v) { c.ar.causal = parse_bool("", v); },
                           [](const TrainConfig& c) { return std::string(c.ar.causal ? "true" : "false"); }};

    m["predictor.k_interp"] = number_field(&TrainConfig::predictor, &PredictorConfig::k_interp);
    m["predictor.time_scale"] = number_field(&TrainConfig::predictor, &PredictorConfig::time_scale);

    m["contrast.bank_size"] = number_field(&TrainConfig::contrast, &ContrastConfig::bank_size);
    m["contrast.negative_ratio"] = number_field(&TrainConfig::contrast, &ContrastConfig::negative_ratio);
    m["contrast.neighbors"] = number_field(&TrainConfig::contrast, &ContrastConfig::neighbors);
    m["contrast.temperature"] = number_field(&TrainConfig::contrast, &ContrastConfig::temperature);
    m["contrast.warmup_margin"] = number_field(&TrainConfig::contrast, &ContrastConfig::warmup_margin);
    m["contrast.scheme"] = enum_field<WeightingScheme>(
        [](TrainConfig& c) -> WeightingScheme& { return c.contrast.scheme; },
        {{"feature_weighted_fusion", WeightingScheme::feature_weighted_fusion},
         {"softmax_weighting", WeightingScheme::softmax_weighting},
         {"add_k_pairs", WeightingScheme::add_k_pairs}});

    m["cluster.prototypes"] = number_field(&TrainConfig::cluster, &LossConfig::prototypes);
    m["cluster.lambda1"] = number_field(&TrainConfig::cluster, &LossConfig::lambda1);
    m["cluster.lambda2"] = number_field(&TrainConfig::cluster, &LossConfig::lambda2);
    m["cluster.temperature"] = number_field(&TrainConfig::cluster, &LossConfig::temperature);
    m["cluster.ema"] = number_field(&TrainConfig::cluster, &LossConfig::ema);
    m["cluster.mode"] = enum_field<LossMode>([](TrainConfig& c) -> LossMode& { return c.cluster.mode; },
                                             {{"prototype_only", LossMode::prototype_only},
                                              {"prototype_plus_soft_category", LossMode::prototype_plus_soft_category}});

    m["train.epochs"] = number_field(&TrainConfig::train, &OptimConfig::epochs);
    m["train.batch_size"] = number_field(&TrainConfig::train, &OptimConfig::batch_size);
    m["train.lr"] = number_field(&TrainConfig::train, &OptimConfig::lr);
    m["train.lr_min"] = number_field(&TrainConfig::train, &OptimConfig::lr_min);
    m["train.warmup_steps"] = number_field(&TrainConfig::train, &OptimConfig::warmup_steps);
    m["train.horizon"] = number_field(&TrainConfig::train, &OptimConfig::horizon);
    m["train.weight_decay"] = number_field(&TrainConfig::train, &OptimConfig::weight_decay);
    m["train.seed"] = number_field(&TrainConfig::train, &OptimConfig::seed);
    m["train.out"] = Field{[](TrainConfig& c, const std::string& v) { c.train.out = v; },
                           [](const TrainConfig& c) { return c.train.out; }};

    m["probe.epochs"] = number_field(&TrainConfig::probe, &ProbeConfig::epochs);
    m["probe.lr"] = number_field(&TrainConfig::probe, &ProbeConfig::lr);
    m["probe.weight_decay"] = number_field(&TrainConfig::probe, &ProbeConfig::weight_decay);
    m["probe.folds"] = number_field(&TrainConfig::probe, &ProbeConfig::folds);
    m["probe.seed"] = number_field(&TrainConfig::probe, &ProbeConfig::seed);
    return m;
  }();
  return f;
}

}  // namespace detail

inline void TrainConfig::validate() const {
  data.synthetic.validate();
  if (data.segments < 2) throw ConfigError("data.segments must be at least 2", "data.segments");
  if (data.videos_per_class < 1) throw ConfigError("data.videos_per_class must be positive", "data.videos_per_class");
  if (data.synthetic.frames % data.segments != 0) {
    throw ConfigError("data.frames must be a multiple of data.segments", "data.segments");
  }
  encoder.validate();
  encoder.output_frames(data.synthetic.frames / data.segments);
  if (encoder.centers > data.synthetic.points) throw ConfigError("encoder.centers exceeds data.points", "encoder.centers");
  if (ar.width != encoder.width) throw ConfigError("autoregressor width must equal encoder.width", "encoder.width");
  ar.validate();
  if (predictor.k_interp < 1) throw ConfigError("predictor.k_interp must be at least 1", "predictor.k_interp");
  if (!(predictor.time_scale >= 0.0)) throw ConfigError("predictor.time_scale must be non-negative", "predictor.time_scale");
  contrast.validate();
  cluster.validate();
  if (cluster.prototypes < 2) throw ConfigError("training needs at least 2 prototypes", "cluster.prototypes");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be positive", "train.batch_size");
  if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be non-negative", "train.lr");
  if (!(train.lr_min >= 0.0 && train.lr_min <= train.lr)) throw ConfigError("train.lr_min must lie in [0, train.lr]", "train.lr_min");
  if (train.warmup_steps < 0) throw ConfigError("train.warmup_steps must be non-negative", "train.warmup_steps");
  if (train.horizon < 0) throw ConfigError("train.horizon must be non-negative", "train.horizon");
  if (!(train.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative", "train.weight_decay");
  if (probe.epochs < 1) throw ConfigError("probe.epochs must be positive", "probe.epochs");
  if (!(probe.lr > 0.0)) throw ConfigError("probe.lr must be positive", "probe.lr");
  if (probe.folds < 2) throw ConfigError("probe.folds must be at least 2", "probe.folds");
}

// Applies one key; errors name the key.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  const auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown configuration key " + key, key);
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what(), key);
  }
  if (key == "encoder.width") cfg.ar.width = cfg.encoder.width;
}

// Parses without validating.
inline TrainConfig parse_config_text(std::string_view text) {
  TrainConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value' for " + detail::trim(line), detail::trim(line));
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline TrainConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path, "");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline void validate_config(const TrainConfig& cfg) { cfg.validate(); }

// All keys with their current values, one per line, sorted; parse_config_text
// of the result reproduces cfg.
inline std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::fields()) out.push_back(k);
  return out;
}

}  // namespace pcsc
