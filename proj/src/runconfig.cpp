#include "geohet/runconfig.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace geohet::runconfig {

using nlohmann::json;

std::string RunPaths::join(const std::string& explicit_path,
                           const std::string& fallback_name) const {
  if (!explicit_path.empty()) return explicit_path;
  if (out_dir.empty()) return fallback_name;
  const char back = out_dir.back();
  return (back == '/') ? out_dir + fallback_name
                       : out_dir + "/" + fallback_name;
}

json default_config_json() {
  return json{
      {"data",
       {{"seed", 42},
        {"n_locations", 600},
        {"n_times", 48},
        {"L", 8},
        {"D", 6},
        {"noise_std", 0.1},
        {"field_order", 2},
        {"season_period", 16.0},
        {"ar1_phi", 0.6},
        {"coef_mean_amp", 0.8},
        {"coef_space_amp", 1.0},
        {"coef_season_amp", 0.8},
        {"split_stride", 6},
        {"split_offset", 3},
        {"normalize", true}}},
      {"graph",
       {{"k_clusters", 16},
        {"k_nn", 8},
        {"sigma", 1.0},
        {"mu", 0.0},
        {"d_cond", 16},
        {"walk_length", 20},
        {"walks_per_node", 10},
        {"window", 5},
        {"p", 1.0},
        {"q", 1.0},
        {"negatives", 5},
        {"walk_epochs", 3},
        {"walk_lr", 0.025}}},
      {"encoder",
       {{"L", 8},
        {"d_model", 32},
        {"n_blocks", 2},
        {"ffn_hidden", 64},
        {"eps", 1e-6}}},
      {"condenc", {{"k_t", 1}, {"activation", "relu"}}},
      {"decoder",
       {{"intercept", false},
        {"ffn_hidden", 64},
        {"loss_weights", {{"dep", 1.0}, {"interp", 1.0}}}}},
      {"train",
       {{"batch", 64},
        {"epochs", 20},
        {"lr", 0.001},
        {"lr_decayed", 0.0001},
        {"lr_decay_epoch", 10},
        {"weight_decay", 0.01},
        {"seed", 42},
        {"deterministic", false}}},
      {"paths",
       {{"out_dir", "out"},
        {"dataset", ""},
        {"graph", ""},
        {"checkpoint", ""},
        {"metrics_csv", ""},
        {"weights_csv", ""},
        {"eval_json", ""},
        {"baseline_csv", ""}}}};
}

namespace {

void merge_strict(json& base, const json& user, const std::string& path) {
  require(user.is_object(), ErrorCode::ConfigError,
          "config section '" + (path.empty() ? "<root>" : path) +
              "' must be a JSON object");
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    require(base.contains(key), ErrorCode::ConfigError,
            "unknown config key: " + where);
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, where);
    } else {
      require(!value.is_object() && !value.is_array(), ErrorCode::ConfigError,
              "config key " + where + " must be a scalar");
      slot = value;
    }
  }
}

const json& section(const json& j, const char* name) { return j.at(name); }

long long geti(const json& sec, const std::string& path, const char* key) {
  const json& v = sec.at(key);
  require(v.is_number_integer(), ErrorCode::ConfigError,
          "config key " + path + "." + key + " must be an integer");
  return v.get<long long>();
}

double getd(const json& sec, const std::string& path, const char* key) {
  const json& v = sec.at(key);
  require(v.is_number(), ErrorCode::ConfigError,
          "config key " + path + "." + key + " must be a number");
  return v.get<double>();
}

bool getb(const json& sec, const std::string& path, const char* key) {
  const json& v = sec.at(key);
  require(v.is_boolean(), ErrorCode::ConfigError,
          "config key " + path + "." + key + " must be a boolean");
  return v.get<bool>();
}

std::string gets(const json& sec, const std::string& path, const char* key) {
  const json& v = sec.at(key);
  require(v.is_string(), ErrorCode::ConfigError,
          "config key " + path + "." + key + " must be a string");
  return v.get<std::string>();
}

RunConfig extract(const json& j) {
  RunConfig c;
  {
    const json& d = section(j, "data");
    c.data.seed = static_cast<std::uint64_t>(geti(d, "data", "seed"));
    c.data.n_locations = static_cast<int>(geti(d, "data", "n_locations"));
    c.data.n_times = static_cast<int>(geti(d, "data", "n_times"));
    c.data.L = static_cast<int>(geti(d, "data", "L"));
    c.data.D = static_cast<int>(geti(d, "data", "D"));
    c.data.noise_std = getd(d, "data", "noise_std");
    c.data.field_order = static_cast<int>(geti(d, "data", "field_order"));
    c.data.season_period = getd(d, "data", "season_period");
    c.data.ar1_phi = getd(d, "data", "ar1_phi");
    c.data.coef_mean_amp = getd(d, "data", "coef_mean_amp");
    c.data.coef_space_amp = getd(d, "data", "coef_space_amp");
    c.data.coef_season_amp = getd(d, "data", "coef_season_amp");
    c.split_stride = static_cast<int>(geti(d, "data", "split_stride"));
    c.split_offset = static_cast<int>(geti(d, "data", "split_offset"));
    c.normalize = getb(d, "data", "normalize");
  }
  {
    const json& g = section(j, "graph");
    c.model.k_clusters = static_cast<int>(geti(g, "graph", "k_clusters"));
    c.model.kernel.k_nn = static_cast<int>(geti(g, "graph", "k_nn"));
    c.model.kernel.sigma = getd(g, "graph", "sigma");
    c.model.kernel.mu = getd(g, "graph", "mu");
    c.model.condenc.d_cond = static_cast<int>(geti(g, "graph", "d_cond"));
    c.model.walks.walk_length =
        static_cast<int>(geti(g, "graph", "walk_length"));
    c.model.walks.walks_per_node =
        static_cast<int>(geti(g, "graph", "walks_per_node"));
    c.model.walks.window = static_cast<int>(geti(g, "graph", "window"));
    c.model.walks.p = getd(g, "graph", "p");
    c.model.walks.q = getd(g, "graph", "q");
    c.model.walks.negatives = static_cast<int>(geti(g, "graph", "negatives"));
    c.model.walks.epochs = static_cast<int>(geti(g, "graph", "walk_epochs"));
    c.model.walks.lr = getd(g, "graph", "walk_lr");
  }
  {
    const json& e = section(j, "encoder");
    c.model.encoder.window_len = static_cast<int>(geti(e, "encoder", "L"));
    c.model.encoder.d_model = static_cast<int>(geti(e, "encoder", "d_model"));
    c.model.encoder.n_blocks = static_cast<int>(geti(e, "encoder", "n_blocks"));
    c.model.encoder.ffn_hidden =
        static_cast<int>(geti(e, "encoder", "ffn_hidden"));
    c.model.encoder.eps = getd(e, "encoder", "eps");
  }
  {
    const json& cd = section(j, "condenc");
    c.model.condenc.k_t = static_cast<int>(geti(cd, "condenc", "k_t"));
    c.model.condenc.activation = gets(cd, "condenc", "activation");
  }
  {
    const json& d = section(j, "decoder");
    c.model.decoder.intercept = getb(d, "decoder", "intercept");
    c.model.decoder.ffn_hidden =
        static_cast<int>(geti(d, "decoder", "ffn_hidden"));
    const json& lw = d.at("loss_weights");
    c.model.decoder.w_dep = getd(lw, "decoder.loss_weights", "dep");
    c.model.decoder.w_interp = getd(lw, "decoder.loss_weights", "interp");
  }
  {
    const json& t = section(j, "train");
    c.train.batch_size = static_cast<int>(geti(t, "train", "batch"));
    c.train.epochs = static_cast<int>(geti(t, "train", "epochs"));
    c.train.optim.lr = getd(t, "train", "lr");
    c.train.optim.lr_decayed = getd(t, "train", "lr_decayed");
    c.train.optim.decay_epoch =
        static_cast<int>(geti(t, "train", "lr_decay_epoch"));
    c.train.optim.weight_decay = getd(t, "train", "weight_decay");
    c.train.seed = static_cast<std::uint64_t>(geti(t, "train", "seed"));
    c.deterministic = getb(t, "train", "deterministic");
  }
  {
    const json& p = section(j, "paths");
    c.paths.out_dir = gets(p, "paths", "out_dir");
    c.paths.dataset = gets(p, "paths", "dataset");
    c.paths.graph = gets(p, "paths", "graph");
    c.paths.checkpoint = gets(p, "paths", "checkpoint");
    c.paths.metrics_csv = gets(p, "paths", "metrics_csv");
    c.paths.weights_csv = gets(p, "paths", "weights_csv");
    c.paths.eval_json = gets(p, "paths", "eval_json");
    c.paths.baseline_csv = gets(p, "paths", "baseline_csv");
  }
  // Derived couplings: window/feature widths flow from the data section.
  c.model.encoder.feature_dim = c.data.D;
  c.model.decoder.feature_dim = c.data.D;
  c.model.decoder.d_model = c.model.encoder.d_model;
  c.model.decoder.d_cond = c.model.condenc.d_cond;
  return c;
}

}  // namespace

void RunConfig::validate() const {
  require(data.n_locations >= 1, ErrorCode::ConfigError,
          "data.n_locations must be >= 1");
  require(data.n_times >= 2, ErrorCode::ConfigError,
          "data.n_times must be >= 2");
  require(data.L >= 1, ErrorCode::ConfigError, "data.L must be >= 1");
  require(data.D >= 1, ErrorCode::ConfigError, "data.D must be >= 1");
  require(data.noise_std >= 0.0, ErrorCode::ConfigError,
          "data.noise_std must be >= 0");
  require(data.field_order >= 0, ErrorCode::ConfigError,
          "data.field_order must be >= 0");
  require(data.season_period > 0.0, ErrorCode::ConfigError,
          "data.season_period must be > 0");
  require(data.ar1_phi > -1.0 && data.ar1_phi < 1.0, ErrorCode::ConfigError,
          "data.ar1_phi must lie in (-1, 1)");
  require(data.coef_mean_amp >= 0.0 && data.coef_space_amp >= 0.0 &&
              data.coef_season_amp >= 0.0,
          ErrorCode::ConfigError, "data coefficient amplitudes must be >= 0");
  require(split_stride >= 2, ErrorCode::ConfigError,
          "data.split_stride must be >= 2");
  require(split_offset >= 0 && split_offset < split_stride,
          ErrorCode::ConfigError,
          "data.split_offset must lie in [0, split_stride)");
  require(model.encoder.window_len == data.L, ErrorCode::ConfigError,
          "encoder.L must equal data.L");
  require(model.kernel.k_nn >= 1, ErrorCode::ConfigError,
          "graph.k_nn must be >= 1");
  require(model.kernel.k_nn < model.k_clusters, ErrorCode::ConfigError,
          "graph.k_nn must be < graph.k_clusters");
  require(model.kernel.sigma > 0.0, ErrorCode::ConfigError,
          "graph.sigma must be > 0");
  require(model.kernel.mu >= 0.0, ErrorCode::ConfigError,
          "graph.mu must be >= 0 (0 = resolve automatically)");
  require(model.walks.walk_length >= 2, ErrorCode::ConfigError,
          "graph.walk_length must be >= 2");
  require(model.walks.walks_per_node >= 1, ErrorCode::ConfigError,
          "graph.walks_per_node must be >= 1");
  require(model.walks.window >= 1, ErrorCode::ConfigError,
          "graph.window must be >= 1");
  require(model.walks.p > 0.0 && model.walks.q > 0.0, ErrorCode::ConfigError,
          "graph.p and graph.q must be > 0");
  require(model.walks.negatives >= 1, ErrorCode::ConfigError,
          "graph.negatives must be >= 1");
  require(model.walks.epochs >= 1, ErrorCode::ConfigError,
          "graph.walk_epochs must be >= 1");
  require(model.walks.lr > 0.0, ErrorCode::ConfigError,
          "graph.walk_lr must be > 0");
  model.validate();
  train.validate();
}

LoadedConfig parse_config(const nlohmann::json& user) {
  LoadedConfig lc;
  lc.resolved = default_config_json();
  merge_strict(lc.resolved, user, "");
  lc.cfg = extract(lc.resolved);
  lc.cfg.validate();
  return lc;
}

LoadedConfig load_config_file(const std::string& path) {
  if (path.empty()) return parse_config(json::object());
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open config file: " + path);
  json user;
  try {
    in >> user;
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError,
         "config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(user);
}

std::string config_digest(const nlohmann::json& resolved) {
  const std::uint64_t h = fnv1a(resolved.dump());
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

}  // namespace geohet::runconfig
