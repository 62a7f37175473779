#include "gabn/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace gabn {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                    "' as " + expected);
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  v = trim(v);
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    bad_value(key, v, "a non-negative integer");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  v = trim(v);
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  v = trim(v);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean (true/false/1/0)");
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  v = trim(v);
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(v.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (auto item : split_list(v)) out.push_back(parse_u64(key, item));
  return out;
}

std::vector<double> parse_double_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  for (auto item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define GABN_SIZE_KEY(NAME, FIELD)                                                       \
  KeyDef {                                                                               \
    NAME, [](RunConfig& c, std::string_view k, std::string_view v) {                     \
      c.FIELD = static_cast<std::size_t>(parse_u64(k, v));                                \
    },                                                                                   \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                       \
  }
#define GABN_U64_KEY(NAME, FIELD)                                                        \
  KeyDef {                                                                               \
    NAME, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_u64(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                       \
  }
#define GABN_DOUBLE_KEY(NAME, FIELD)                                                     \
  KeyDef {                                                                               \
    NAME, [](RunConfig& c, std::string_view k, std::string_view v) {                     \
      c.FIELD = parse_double(k, v);                                                      \
    },                                                                                   \
        [](const RunConfig& c) { return format_double(c.FIELD); }                        \
  }
#define GABN_BOOL_KEY(NAME, FIELD)                                                       \
  KeyDef {                                                                               \
    NAME, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_bool(k, v); }, \
        [](const RunConfig& c) { return fmt_bool(c.FIELD); }                             \
  }
#define GABN_SIZE_LIST_KEY(NAME, FIELD)                                                  \
  KeyDef {                                                                               \
    NAME, [](RunConfig& c, std::string_view k, std::string_view v) {                     \
      c.FIELD = parse_size_list(k, v);                                                   \
    },                                                                                   \
        [](const RunConfig& c) { return join(c.FIELD); }                                 \
  }

std::optional<std::size_t> parse_auto(std::string_view k, std::string_view v) {
  if (trim(v) == "auto") return std::nullopt;
  return static_cast<std::size_t>(parse_u64(k, v));
}

std::string fmt_auto(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : "auto";
}

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table{
      // model
      GABN_SIZE_LIST_KEY("channels", setup.recognizer.channels),
      GABN_BOOL_KEY("residual", setup.recognizer.residual),
      GABN_SIZE_KEY("embedding_dim", setup.recognizer.embedding_dim),
      GABN_SIZE_LIST_KEY("disc_channels", setup.discriminator.channels),
      // loss
      GABN_DOUBLE_KEY("s", setup.loss.scale),
      GABN_DOUBLE_KEY("m", setup.loss.margin),
      GABN_DOUBLE_KEY("t_confidence", setup.loss.t_confidence),
      // erasure
      GABN_SIZE_KEY("n_mask", setup.mask.n_mask),
      KeyDef{"h_mask", [](RunConfig& c, std::string_view k,
                          std::string_view v) { c.h_mask = parse_auto(k, v); },
             [](const RunConfig& c) { return fmt_auto(c.h_mask); }},
      KeyDef{"w_mask", [](RunConfig& c, std::string_view k,
                          std::string_view v) { c.w_mask = parse_auto(k, v); },
             [](const RunConfig& c) { return fmt_auto(c.w_mask); }},
      KeyDef{"fill_value",
             [](RunConfig& c, std::string_view k, std::string_view v) {
               c.setup.mask.fill_value = parse_double_list(k, v);
             },
             [](const RunConfig& c) { return join(c.setup.mask.fill_value); }},
      // training
      GABN_SIZE_KEY("epochs", setup.train.epochs),
      GABN_SIZE_KEY("steps_per_epoch", setup.train.steps_per_epoch),
      GABN_SIZE_KEY("batch_size", setup.train.batch_size),
      GABN_DOUBLE_KEY("lr", setup.train.lr),
      GABN_DOUBLE_KEY("disc_lr", setup.train.disc_lr),
      GABN_DOUBLE_KEY("momentum", setup.train.momentum),
      GABN_DOUBLE_KEY("weight_decay", setup.train.weight_decay),
      GABN_SIZE_LIST_KEY("milestones", setup.train.milestones),
      GABN_U64_KEY("seed", setup.train.seed),
      GABN_SIZE_KEY("disc_steps", setup.train.disc_steps),
      GABN_BOOL_KEY("use_gam_ct", setup.train.use_gam_ct),
      GABN_BOOL_KEY("use_gam_sfre", setup.train.use_gam_sfre),
      GABN_BOOL_KEY("use_conf_loss", setup.train.use_conf_loss),
      GABN_BOOL_KEY("use_random_erase_baseline", setup.train.use_random_erase_baseline),
      // data
      KeyDef{"data_root",
             [](RunConfig& c, std::string_view, std::string_view v) { c.data_root = trim(v); },
             [](const RunConfig& c) { return c.data_root; }},
      GABN_SIZE_KEY("image_side", synthetic.image_side),
      GABN_SIZE_KEY("groups", synthetic.groups),
      GABN_SIZE_KEY("ids_per_group", synthetic.ids_per_group),
      GABN_SIZE_KEY("eval_ids_per_group", synthetic.eval_ids_per_group),
      GABN_SIZE_KEY("images_per_id", synthetic.images_per_id),
      GABN_U64_KEY("data_seed", synthetic.seed),
      GABN_DOUBLE_KEY("group_signal_strength", synthetic.group_signal_strength),
      GABN_DOUBLE_KEY("id_signal_strength", synthetic.id_signal_strength),
      GABN_DOUBLE_KEY("noise", synthetic.noise),
      // evaluation
      GABN_SIZE_KEY("eval_pairs_per_group", eval.pairs_per_group),
      GABN_DOUBLE_KEY("eval_positive_fraction", eval.positive_fraction),
      GABN_U64_KEY("eval_pair_seed", eval.pair_seed),
      GABN_SIZE_KEY("eval_folds", eval.folds),
      // output
      KeyDef{"out_dir",
             [](RunConfig& c, std::string_view, std::string_view v) {
               c.out_dir = std::filesystem::path(std::string(trim(v)));
             },
             [](const RunConfig& c) { return c.out_dir ? c.out_dir->string() : std::string(); }},
  };
  return table;
}

const KeyDef& find_key(std::string_view key) {
  for (const auto& k : key_table()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

RunConfig::RunConfig() {
  // Desk-scale defaults for 64x64 synthetic data on one CPU core.
  setup.loss.scale = 4.0;
  setup.recognizer.channels = {8, 16, 32, 64};
  setup.train.epochs = 10;
  setup.train.steps_per_epoch = 50;
  setup.train.lr = 0.01;
  setup.train.disc_lr = 0.001;
  setup.train.milestones = {7};
}

void RunConfig::set(std::string_view key, std::string_view value) {
  find_key(trim(key)).set(*this, trim(key), value);
}

std::string RunConfig::get(std::string_view key) const { return find_key(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.name);
    return out;
  }();
  return names;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& k : key_table()) {
    if (k.name == "out_dir" && !out_dir) continue;
    out[k.name] = k.get(*this);
  }
  return out;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
  RunConfig c;
  for (const auto& [k, v] : values) c.set(k, v);
  return c;
}

TrainSetup RunConfig::resolved_setup() const {
  TrainSetup s = setup;
  const auto side = image_side();
  const auto def = MaskConfig::defaults_for(side);
  s.mask.h_mask = h_mask.value_or(def.h_mask);
  s.mask.w_mask = w_mask.value_or(def.w_mask);
  return s;
}

void RunConfig::validate() const {
  if (data_root.empty()) synthetic.validate();
  const auto s = resolved_setup();
  s.loss.validate();
  s.train.validate();
  s.mask.validate(image_side(), image_side());
  auto rec = s.recognizer;
  rec.image_side = image_side();
  rec.scale = s.loss.scale;
  rec.margin = s.loss.margin;
  rec.validate();
  auto disc = s.discriminator;
  disc.image_side = image_side();
  disc.validate();
  if (!(eval.positive_fraction >= 0 && eval.positive_fraction <= 1)) {
    throw ConfigError("eval_positive_fraction must be in [0, 1]");
  }
  if (eval.pairs_per_group < 1) throw ConfigError("eval_pairs_per_group must be >= 1");
}

std::map<std::string, std::string> parse_config_text(std::string_view text,
                                                     std::string_view source) {
  std::map<std::string, std::string> out;
  std::size_t lineno = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    if (eq == std::string_view::npos) {
      throw ConfigError(where + ": expected 'key = value', got '" + std::string(line) + "'");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(where + ": missing key before '='");
    if (!out.emplace(key, std::string(trim(line.substr(eq + 1)))).second) {
      throw ConfigError(where + ": key '" + key + "' given twice");
    }
  }
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return RunConfig::from_map(parse_config_text(ss.str(), path.string()));
}

}  // namespace gabn
