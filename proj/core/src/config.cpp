#include "protodist/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "protodist/errors.hpp"

namespace protodist {

using nlohmann::json;

PhantomSpec RunConfig::volume_spec() const {
  PhantomSpec s = phantom;
  s.contrast = data.volume_contrast;
  return s;
}

PhantomSpec RunConfig::slice_spec() const {
  PhantomSpec s = phantom;
  s.contrast = data.slice_contrast;
  return s;
}

RunConfig default_config() { return RunConfig{}; }

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["phantom"] = {
      {"classes", c.phantom.num_classes}, {"depth", c.phantom.depth},
      {"height", c.phantom.height},       {"width", c.phantom.width},
      {"noise_sd", c.phantom.noise_sd},   {"jitter", c.phantom.jitter},
  };
  j["data"] = {
      {"volumes_train", c.data.volumes_train},
      {"volumes_val", c.data.volumes_val},
      {"volume_contrast", contrast_name(c.data.volume_contrast)},
      {"slices_train", c.data.slices_train},
      {"slices_val", c.data.slices_val},
      {"slices_test", c.data.slices_test},
      {"slice_contrast", contrast_name(c.data.slice_contrast)},
  };
  j["crop"] = {{"zlo", c.crop.zlo}, {"zhi", c.crop.zhi}};
  j["train"] = {
      {"teacher_epochs", c.train.teacher_epochs},
      {"student_epochs", c.train.student_epochs},
      {"distill_epochs", c.train.distill_epochs},
      {"batch_size", c.train.batch_size},
      {"lr", c.train.lr},
      {"adam_beta1", c.train.adam_beta1},
      {"adam_beta2", c.train.adam_beta2},
      {"adam_eps", c.train.adam_eps},
  };
  j["loss"] = {
      {"beta", c.train.weights.beta},
      {"lambda_ce", c.train.weights.lambda_ce},
      {"lambda_dice", c.train.weights.lambda_dice},
      {"inter_mode", inter_mode_name(c.train.inter_mode)},
  };
  j["sweep_sizes"] = c.sweep_sizes;
  j["out_dir"] = c.out_dir;
  return j;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config error at " + path + ": " + what);
}

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  ~Reader() = default;

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(path_.empty() ? key : path_ + "." + key, "unknown key");
    }
  }

  bool has(const char* key) {
    return j_.contains(key);
  }

  Reader object(const char* key) {
    seen_.insert(key);
    return Reader(j_.at(key), join(key));
  }

  template <class T>
  void get_uint(const char* key, T& out, std::uint64_t lo, std::uint64_t hi) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(join(key), "expected a non-negative integer");
    }
    const std::uint64_t u = v.get<std::uint64_t>();
    if (u < lo || u > hi) {
      fail(join(key), "value " + std::to_string(u) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
    }
    out = static_cast<T>(u);
  }

  void get_double(const char* key, double& out, double lo, double hi) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(join(key), "expected a number");
    const double d = v.get<double>();
    if (!(d >= lo && d <= hi)) {
      fail(join(key), "value " + std::to_string(d) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
    }
    out = d;
  }

  void get_contrast(const char* key, Contrast& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const std::string s = get_str(key);
    if (s == "plain") {
      out = Contrast::plain;
    } else if (s == "shifted") {
      out = Contrast::shifted;
    } else {
      fail(join(key), "expected \"plain\" or \"shifted\", got \"" + s + "\"");
    }
  }

  void get_inter_mode(const char* key, InterMode& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const std::string s = get_str(key);
    if (s == "per_channel") {
      out = InterMode::per_channel;
    } else if (s == "flat") {
      out = InterMode::flat;
    } else {
      fail(join(key), "expected \"per_channel\" or \"flat\", got \"" + s + "\"");
    }
  }

  void get_string(const char* key, std::string& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    out = get_str(key);
  }

  void get_sizes(const char* key, std::vector<std::size_t>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array() || v.empty()) fail(join(key), "expected a non-empty array of integers");
    std::vector<std::size_t> sizes;
    for (const auto& e : v) {
      if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<long long>() > 0)) {
        fail(join(key), "expected positive integers");
      }
      sizes.push_back(e.get<std::size_t>());
    }
    out = std::move(sizes);
  }

 private:
  std::string join(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  std::string get_str(const char* key) {
    const json& v = j_.at(key);
    if (!v.is_string()) fail(join(key), "expected a string");
    return v.get<std::string>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

RunConfig from_json(const json& j) {
  RunConfig c = default_config();
  Reader root(j, "");
  root.get_uint("seed", c.seed, 0, UINT64_MAX);
  if (root.has("phantom")) {
    Reader r = root.object("phantom");
    r.get_uint("classes", c.phantom.num_classes, 2, 64);
    r.get_uint("depth", c.phantom.depth, 4, 4096);
    r.get_uint("height", c.phantom.height, 8, 4096);
    r.get_uint("width", c.phantom.width, 8, 4096);
    r.get_double("noise_sd", c.phantom.noise_sd, 0.0, 10.0);
    // above 0.25 the jittered organs could leave the field of view
    r.get_double("jitter", c.phantom.jitter, 0.0, 0.25);
    r.finish();
  }
  if (root.has("data")) {
    Reader r = root.object("data");
    r.get_uint("volumes_train", c.data.volumes_train, 1, 100000);
    r.get_uint("volumes_val", c.data.volumes_val, 1, 100000);
    r.get_contrast("volume_contrast", c.data.volume_contrast);
    r.get_uint("slices_train", c.data.slices_train, 1, 1000000);
    r.get_uint("slices_val", c.data.slices_val, 1, 1000000);
    r.get_uint("slices_test", c.data.slices_test, 1, 1000000);
    r.get_contrast("slice_contrast", c.data.slice_contrast);
    r.finish();
  }
  if (root.has("crop")) {
    Reader r = root.object("crop");
    r.get_double("zlo", c.crop.zlo, 0.0, 1.0);
    r.get_double("zhi", c.crop.zhi, 0.0, 1.0);
    r.finish();
    if (!(c.crop.zlo < c.crop.zhi)) fail("crop.zlo", "must be strictly below crop.zhi");
  }
  if (root.has("train")) {
    Reader r = root.object("train");
    r.get_uint("teacher_epochs", c.train.teacher_epochs, 1, 1000000);
    r.get_uint("student_epochs", c.train.student_epochs, 1, 1000000);
    r.get_uint("distill_epochs", c.train.distill_epochs, 1, 1000000);
    r.get_uint("batch_size", c.train.batch_size, 1, 100000);
    r.get_double("lr", c.train.lr, 1e-12, 1e6);
    r.get_double("adam_beta1", c.train.adam_beta1, 0.0, 0.9999999);
    r.get_double("adam_beta2", c.train.adam_beta2, 0.0, 0.9999999);
    r.get_double("adam_eps", c.train.adam_eps, 1e-300, 1.0);
    r.finish();
  }
  if (root.has("loss")) {
    Reader r = root.object("loss");
    r.get_double("beta", c.train.weights.beta, 0.0, 1e6);
    r.get_double("lambda_ce", c.train.weights.lambda_ce, 0.0, 1e6);
    r.get_double("lambda_dice", c.train.weights.lambda_dice, 0.0, 1e6);
    r.get_inter_mode("inter_mode", c.train.inter_mode);
    r.finish();
  }
  root.get_sizes("sweep_sizes", c.sweep_sizes);
  root.get_string("out_dir", c.out_dir);
  root.finish();
  c.train.seed = c.seed;
  return c;
}

json parse_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return json(text);  // bare strings need no quotes
  return v;
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& assignments) {
  json j = to_json(cfg);
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override must look like dotted.key=value, got \"" + a + "\"");
    }
    const std::string dotted = a.substr(0, eq);
    json* node = &j;
    std::size_t pos = 0;
    while (true) {
      const auto dot = dotted.find('.', pos);
      const std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (key.empty()) throw ConfigError("override has an empty path segment: \"" + a + "\"");
      if (dot == std::string::npos) {
        (*node)[key] = parse_value(a.substr(eq + 1));
        break;
      }
      if (!node->contains(key) || !(*node)[key].is_object()) {
        throw ConfigError("config error at " + dotted.substr(0, dot) + ": unknown key");
      }
      node = &(*node)[key];
      pos = dot + 1;
    }
  }
  return from_json(j);
}

std::string canonical_json(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("out_dir");  // purely a path; identical runs in two places must hash alike
  return j.dump();
}

std::uint64_t config_hash(const RunConfig& cfg) {
  const std::string s = canonical_json(cfg);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace protodist
