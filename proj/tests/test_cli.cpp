// End-to-end tests of the geohet binary: every command runs as a real
// subprocess against small configs in a scratch directory.  The binary path
// comes from GEOHET_CLI (set by ctest) or the compiled-in default.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "geohet/common.hpp"
#include "geohet/csv.hpp"
#include "geohet/geodata.hpp"
#include "geohet/model.hpp"
#include "geohet/runconfig.hpp"
#include "geohet/stcg.hpp"
#include "geohet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geohet;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("GEOHET_CLI")) return env;
#ifdef GEOHET_CLI_PATH
  return GEOHET_CLI_PATH;
#else
  return "geohet";
#endif
}

struct RunOut {
  int code = -1;
  std::string out;  // stdout + stderr
};

RunOut run_cli(const std::string& args) {
  const std::string log = "/tmp/geohet_cli_out.txt";
  const std::string cmd = cli_path() + " " + args + " > " + log + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunOut r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json slurp_json(const std::string& path) { return json::parse(slurp(path)); }

// Fresh scratch dir with a small config written to <dir>/config.json.
struct Scratch {
  std::string dir;
  std::string config;

  explicit Scratch(const std::string& name, json overrides = {}) {
    dir = "/tmp/geohet_cli_" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    json cfg{{"data",
              {{"n_locations", 40},
               {"n_times", 12},
               {"L", 4},
               {"D", 3},
               {"field_order", 1},
               {"split_stride", 4},
               {"split_offset", 2}}},
             {"graph",
              {{"k_clusters", 6},
               {"k_nn", 3},
               {"d_cond", 6},
               {"walk_length", 8},
               {"walks_per_node", 4},
               {"window", 2},
               {"walk_epochs", 1}}},
             {"encoder",
              {{"L", 4}, {"d_model", 8}, {"n_blocks", 1}, {"ffn_hidden", 8}}},
             {"decoder", {{"ffn_hidden", 8}}},
             {"train", {{"batch", 32}, {"epochs", 2}, {"seed", 7}}},
             {"paths", {{"out_dir", dir + "/out"}}}};
    for (auto& [sec, vals] : overrides.items())
      for (auto& [k, v] : vals.items()) cfg[sec][k] = v;
    config = dir + "/config.json";
    std::ofstream out(config);
    out << cfg.dump(2);
  }

  std::string out(const std::string& name) const { return dir + "/out/" + name; }
};

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("gen writes dataset, manifest counts match, echo and digest appear") {
  Scratch s("gen");
  const RunOut r = run_cli("--config " + s.config + " gen");
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("config digest ") != std::string::npos);
  REQUIRE(fs::exists(s.out("dataset.csv")));
  REQUIRE(fs::exists(s.out("dataset.csv.manifest.json")));
  REQUIRE(fs::exists(s.out("config.resolved.json")));

  const json manifest = slurp_json(s.out("dataset.csv.manifest.json"));
  const int n_samples = manifest.at("counts").at("n_samples").get<int>();
  CHECK(n_samples == 40 * 12);  // one sample per (location, time step)
  // L window rows per sample plus the header line.
  const int csv_lines = count_lines(slurp(s.out("dataset.csv")));
  CHECK(csv_lines == n_samples * 4 + 1);

  const json echoed = slurp_json(s.out("config.resolved.json"));
  CHECK(echoed["data"]["n_locations"] == 40);
  CHECK(echoed["train"]["lr"] == 0.001);  // default filled in
}

TEST_CASE("gen is byte-reproducible for a fixed seed") {
  Scratch a("gen_a"), b("gen_b");
  REQUIRE(run_cli("--config " + a.config + " gen").code == 0);
  REQUIRE(run_cli("--config " + b.config + " gen").code == 0);
  CHECK(slurp(a.out("dataset.csv")) == slurp(b.out("dataset.csv")));
  CHECK(slurp(a.out("dataset.csv.manifest.json")) ==
        slurp(b.out("dataset.csv.manifest.json")));
}

TEST_CASE("invalid config exits 2 and names the field") {
  Scratch s("badcfg", json{{"data", {{"n_locations", 0}}}});
  const RunOut r = run_cli("--config " + s.config + " gen");
  CHECK(r.code == 2);
  CHECK(r.out.find("data.n_locations") != std::string::npos);
}

TEST_CASE("unknown config keys and bad env threads exit 2; missing data exits 3") {
  Scratch s("exitcodes");
  {
    std::ofstream out(s.dir + "/unk.json");
    out << R"({"nope": 1})";
  }
  CHECK(run_cli("--config " + s.dir + "/unk.json gen").code == 2);
  // train before gen: dataset file missing -> data error
  CHECK(run_cli("--config " + s.config + " train").code == 3);
  const std::string save_env =
      std::getenv("GEOHET_THREADS") ? std::getenv("GEOHET_THREADS") : "";
  setenv("GEOHET_THREADS", "zebra", 1);
  CHECK(run_cli("--config " + s.config + " gen").code == 2);
  if (save_env.empty())
    unsetenv("GEOHET_THREADS");
  else
    setenv("GEOHET_THREADS", save_env.c_str(), 1);
}

TEST_CASE("graph command exports a lossless JSON graph") {
  Scratch s("graph");
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);
  const RunOut r = run_cli("--config " + s.config + " graph");
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  const ConditionGraph g = load_graph_json(s.out("graph.json"));
  CHECK(g.n_nodes() == 6);
  CHECK(g.k_nn == 3);
  CHECK(g.d_cond() == 6);
}

TEST_CASE("deterministic training is bitwise-reproducible across runs") {
  // The exact same config must be used twice: the checkpoint embeds the
  // resolved config, so even the output directory has to match.
  Scratch a("det");
  REQUIRE(run_cli("--config " + a.config + " gen").code == 0);
  REQUIRE(run_cli("--config " + a.config + " --deterministic train").code == 0);
  const std::string ckpt1 = slurp(a.out("model.ckpt"));
  const std::string log1 = slurp(a.out("metrics.csv"));
  REQUIRE(run_cli("--config " + a.config + " --deterministic train").code == 0);
  CHECK(slurp(a.out("metrics.csv")) == log1);
  CHECK(slurp(a.out("model.ckpt")) == ckpt1);
}

TEST_CASE("train -> eval -> export-weights round trip") {
  Scratch s("pipeline");
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);
  const RunOut tr = run_cli("--config " + s.config + " train");
  CAPTURE(tr.out);
  REQUIRE(tr.code == 0);
  REQUIRE(fs::exists(s.out("model.ckpt")));
  REQUIRE(fs::exists(s.out("metrics.csv")));
  // metrics log: header + one row per epoch
  CHECK(count_lines(slurp(s.out("metrics.csv"))) == 1 + 2);

  const RunOut ev = run_cli("--config " + s.config + " eval --split test");
  CAPTURE(ev.out);
  REQUIRE(ev.code == 0);
  const json em = slurp_json(s.out("eval.json"));
  CHECK(em.at("split") == "test");
  CHECK(em.at("n").get<int>() == 40 * 3);  // t in {2, 6, 10} held out
  CHECK(std::isfinite(em.at("rmse").get<double>()));

  const RunOut ex = run_cli("--config " + s.config +
                            " export-weights --split all --geojson " +
                            s.out("weights.geojson"));
  CAPTURE(ex.out);
  REQUIRE(ex.code == 0);
  const csv::Table t = csv::read_table(s.out("weights.csv"));
  CHECK(t.rows.rows() == 40 * 12);  // every sample
  const std::vector<std::string> want{"lon",  "lat",   "t_index", "w_1", "w_2",
                                      "w_3",  "y_hat", "y_hat_interp"};
  REQUIRE(t.header.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(t.header[i] == want[i]);
  // exported interpretable prediction = weights . xbar, by construction
  const json gj = slurp_json(s.out("weights.geojson"));
  CHECK(gj.at("type") == "FeatureCollection");
  REQUIRE(gj.at("features").size() == 40 * 12);
  const json& f0 = gj.at("features").at(0);
  CHECK(f0.at("type") == "Feature");
  CHECK(f0.at("geometry").at("type") == "Point");
  CHECK(f0.at("geometry").at("coordinates").size() == 2);
  CHECK(f0.at("properties").contains("w_1"));
  CHECK(f0.at("properties").contains("y_hat_interp"));
}

TEST_CASE("eval of a perfect-fit fixture reports rmse 0 and r2 1") {
  Scratch s("perfect");
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);

  // Build the model in-process, replace targets with its own predictions,
  // and hand the CLI a checkpoint of exactly those parameters.
  const LoadedConfig lc = load_config_file(s.config);
  Dataset ds = load_dataset(s.out("dataset.csv"), lc.cfg.data.L);
  Mat pts(0, 2);
  {
    std::vector<std::pair<double, double>> seen;
    for (const Sample& sm : ds.samples) {
      std::pair<double, double> key{sm.lon, sm.lat};
      bool dup = false;
      for (auto& k : seen)
        if (k == key) dup = true;
      if (!dup) seen.push_back(key);
    }
    pts = Mat(Eigen::Index(seen.size()), 2);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      pts(i, 0) = seen[std::size_t(i)].first;
      pts(i, 1) = seen[std::size_t(i)].second;
    }
  }
  const ConditionGraph g =
      build_graph(pts, lc.cfg.model.k_clusters, lc.cfg.model.kernel,
                  lc.cfg.model.condenc.d_cond, lc.cfg.data.seed,
                  lc.cfg.model.walks);
  int max_t = 0;
  for (const Sample& sm : ds.samples) max_t = std::max(max_t, sm.t_index);
  const Eigen::Index n_times = max_t + 1;
  const Params params =
      init_model_params(lc.cfg.model, g, n_times, lc.cfg.train.seed);
  const Mat P = propagation_matrix(g);
  const PreparedData prep = prepare_data(ds, g, n_times);
  std::vector<int> all(ds.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  const auto preds =
      evaluate(params, lc.cfg.model, P, g.n_nodes(), n_times, ds, prep, all);
  for (std::size_t i = 0; i < all.size(); ++i)
    ds.samples[i].target = preds[i].y_hat;
  save_dataset(ds, s.dir + "/perfect.csv", lc.cfg.data.seed);

  Checkpoint ck;
  ck.params = params;
  ck.has_opt = false;
  ck.epoch = 1;
  ck.config = lc.resolved;
  save_checkpoint(s.dir + "/perfect.ckpt", ck);

  const RunOut ev = run_cli("--config " + s.config +
                            " eval --split all --checkpoint " + s.dir +
                            "/perfect.ckpt --dataset " + s.dir +
                            "/perfect.csv");
  CAPTURE(ev.out);
  REQUIRE(ev.code == 0);
  const json em = slurp_json(s.out("eval.json"));
  CHECK(em.at("rmse").get<double>() == 0.0);
  CHECK(em.at("r2").get<double>() == 1.0);
}

TEST_CASE("baseline ols on noiseless constant-coefficient data") {
  Scratch s("ols", json{{"data",
                         {{"noise_std", 0.0},
                          {"coef_space_amp", 0.0},
                          {"coef_season_amp", 0.0},
                          {"field_order", 0},
                          {"normalize", false}}}});
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);
  const RunOut r = run_cli("--config " + s.config + " baseline --method ols");
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  const json m = slurp_json(s.out("baseline_ols.json"));
  CHECK(m.at("test").at("r2").get<double>() >= 0.999);
  CHECK_FALSE(m.at("ridge_used").get<bool>());
  CHECK(m.at("fit_rows").get<std::string>() == "train_samples");
  // Coefficient CSV: one row per training location, t_index = -1.
  const csv::Table t = csv::read_table(s.out("baseline_ols.csv"));
  CHECK(t.rows.rows() == 40);
  CHECK(t.header.at(2) == "t_index");
  CHECK(t.rows(0, 2) == -1.0);
}

TEST_CASE("baseline gwr writes the shared export schema and metrics") {
  Scratch s("gwr");
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);
  const RunOut r = run_cli("--config " + s.config +
                           " baseline --method gwr --bandwidth 0.5");
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  const json m = slurp_json(s.out("baseline_gwr.json"));
  CHECK(m.at("bandwidth").get<double>() == 0.5);
  CHECK(std::isfinite(m.at("test").at("rmse").get<double>()));
  // GWR train metrics are in-sample on its fitting table: the per-location
  // averaged rows, one per training location.
  CHECK(m.at("fit_rows").get<std::string>() == "train_location_means");
  CHECK(m.at("train").at("n").get<int>() == 40);
  const csv::Table t = csv::read_table(s.out("baseline_gwr.csv"));
  CHECK(t.rows.rows() == 40);
  const std::vector<std::string> want{"lon",  "lat",   "t_index", "w_1", "w_2",
                                      "w_3",  "y_hat", "y_hat_interp"};
  REQUIRE(t.header.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(t.header[i] == want[i]);
  CHECK(run_cli("--config " + s.config + " baseline --method kriging").code ==
        2);
}

TEST_CASE("gradcheck command passes on the toy config") {
  Scratch s("gradcheck");
  const RunOut r =
      run_cli("--config " + s.config + " gradcheck --probes 40");
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("gradient check PASSED") != std::string::npos);
  CHECK(r.out.find("encoder") != std::string::npos);
  CHECK(r.out.find("decoder.target") != std::string::npos);
}

TEST_CASE("resume continues the epoch counter in the metric log") {
  Scratch s("resume");
  REQUIRE(run_cli("--config " + s.config + " gen").code == 0);
  REQUIRE(run_cli("--config " + s.config + " train").code == 0);
  Scratch s4("resume4", json{{"train", {{"epochs", 4}}}});
  // same data; point the longer run at the first run's artifacts
  const RunOut r = run_cli("--config " + s4.config + " --out " + s.dir +
                           "/out train --resume " + s.out("model.ckpt"));
  CAPTURE(r.out);
  REQUIRE(r.code == 0);
  // The log covers (best epoch of run 1, 4] with consecutive epoch numbers.
  const csv::Table t = csv::read_table(s.out("metrics.csv"));
  REQUIRE(t.rows.rows() >= 2);
  CHECK(t.rows(0, 0) >= 2.0);
  CHECK(t.rows(t.rows.rows() - 1, 0) == 4.0);
  for (Eigen::Index i = 1; i < t.rows.rows(); ++i)
    CHECK(t.rows(i, 0) == t.rows(i - 1, 0) + 1.0);
}
