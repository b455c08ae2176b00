// geohet command-line pipeline: dataset generation, condition-graph building,
// training, evaluation, weight export, gradient checking, and the GWR/OLS
// baselines.  One JSON config document drives everything; the resolved copy
// is echoed next to the outputs and its digest printed by every command.
//
// Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numeric
// failure (divergence, failed gradient check).

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "geohet/baselines.hpp"
#include "geohet/csv.hpp"
#include "geohet/runconfig.hpp"
#include "geohet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geohet;

namespace {

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError:
      return 2;
    case ErrorCode::NumericError:
      return 4;
    default:
      return 3;
  }
}

struct GlobalOpts {
  std::string config_path;
  std::string out_override;
  int threads = 0;  // 0 = GEOHET_THREADS or 1
  bool deterministic = false;
};

LoadedConfig load_with_overrides(const GlobalOpts& g) {
  LoadedConfig lc = load_config_file(g.config_path);
  if (!g.out_override.empty()) {
    lc.cfg.paths.out_dir = g.out_override;
    lc.resolved["paths"]["out_dir"] = g.out_override;
  }
  if (g.deterministic) {
    lc.cfg.deterministic = true;
    lc.resolved["train"]["deterministic"] = true;
  }
  lc.cfg.train.threads = resolve_threads(g.threads, lc.cfg.deterministic);
  return lc;
}

void echo_config(const LoadedConfig& lc) {
  fs::create_directories(lc.cfg.paths.out_dir);
  const std::string path = lc.cfg.paths.resolved_config_path();
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write " + path);
  out << lc.resolved.dump(2) << "\n";
  std::cout << "config digest " << config_digest(lc.resolved) << "\n";
}

// Distinct sample locations in first-seen order (graph nodes are fitted to
// sites, not to sample multiplicity).
Mat distinct_points(const Dataset& ds) {
  std::vector<std::pair<double, double>> seen;
  for (const Sample& s : ds.samples) {
    const std::pair<double, double> key{s.lon, s.lat};
    bool found = false;
    for (const auto& k : seen)
      if (k == key) {
        found = true;
        break;
      }
    if (!found) seen.push_back(key);
  }
  Mat pts(Eigen::Index(seen.size()), 2);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    pts(i, 0) = seen[std::size_t(i)].first;
    pts(i, 1) = seen[std::size_t(i)].second;
  }
  return pts;
}

ConditionGraph build_graph_for(const RunConfig& cfg, const Dataset& ds) {
  return build_graph(distinct_points(ds), cfg.model.k_clusters,
                     cfg.model.kernel, cfg.model.condenc.d_cond, cfg.data.seed,
                     cfg.model.walks);
}

Dataset load_dataset_checked(const std::string& path, Eigen::Index L) {
  require(fs::exists(path), ErrorCode::IoError,
          "dataset file not found: " + path + " (run `gen` first?)");
  return load_dataset(path, L);
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write " + path);
  out << j.dump(2) << "\n";
}

// Model state rebuilt from a self-describing checkpoint plus a dataset.
struct LoadedModel {
  Checkpoint ck;
  RunConfig cfg;
  json resolved;
  ConditionGraph graph;
  Mat P;
  Eigen::Index n_times = 0;
};

LoadedModel load_model(const std::string& ckpt_path,
                       const std::string& ds_path, Dataset& ds_out) {
  LoadedModel lm;
  lm.ck = load_checkpoint(ckpt_path);
  LoadedConfig emb = parse_config(lm.ck.config);
  lm.cfg = emb.cfg;
  lm.resolved = emb.resolved;
  ds_out = load_dataset_checked(ds_path, lm.cfg.data.L);
  lm.graph = build_graph_for(lm.cfg, ds_out);
  lm.P = propagation_matrix(lm.graph);
  const Mat& ne = lm.ck.params.at("stcg.node_embed");
  require(ne.rows() % lm.graph.n_nodes() == 0, ErrorCode::DataError,
          "checkpoint node embedding rows are not a multiple of graph size");
  lm.n_times = ne.rows() / lm.graph.n_nodes();
  int max_t = 0;
  for (const Sample& s : ds_out.samples) max_t = std::max(max_t, s.t_index);
  require(max_t < lm.n_times, ErrorCode::DataError,
          "dataset time index " + std::to_string(max_t) +
              " exceeds the checkpoint's time grid");
  return lm;
}

std::vector<int> split_indices(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train_indices();
  if (split == "test") return ds.test_indices();
  if (split == "all") {
    std::vector<int> all(ds.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
    return all;
  }
  fail(ErrorCode::ConfigError, "--split must be train, test or all");
}

// ---------------------------------------------------------------------------

int cmd_gen(const LoadedConfig& lc, const std::string& truth_csv) {
  echo_config(lc);
  const RunConfig& cfg = lc.cfg;
  auto [ds, field] = generate_synthetic(cfg.data);
  assign_time_split(ds, cfg.split_stride, cfg.split_offset);
  if (cfg.normalize) zscore_normalize(ds);
  const std::string path = cfg.paths.dataset_path();
  save_dataset(ds, path, cfg.data.seed);
  if (!truth_csv.empty()) {
    std::vector<std::string> header{"lon", "lat", "t_index"};
    for (int j = 1; j <= cfg.data.D; ++j)
      header.push_back("w_" + std::to_string(j));
    Mat rows(ds.size(), 3 + cfg.data.D);
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      const Sample& s = ds.samples[std::size_t(i)];
      const Vec w = field.eval(s.lon, s.lat, double(s.t_index));
      rows(i, 0) = s.lon;
      rows(i, 1) = s.lat;
      rows(i, 2) = double(s.t_index);
      rows.row(i).tail(cfg.data.D) = w.transpose();
    }
    csv::write_table(truth_csv, header, rows);
  }
  std::cout << "wrote " << path << " (" << ds.size() << " samples: "
            << ds.train_indices().size() << " train, "
            << ds.test_indices().size() << " test)\n";
  return 0;
}

int cmd_graph(const LoadedConfig& lc) {
  echo_config(lc);
  const RunConfig& cfg = lc.cfg;
  const Dataset ds = load_dataset_checked(cfg.paths.dataset_path(), cfg.data.L);
  const ConditionGraph g = build_graph_for(cfg, ds);
  save_graph_json(g, cfg.paths.graph_path());
  int wrap = 0;
  for (Eigen::Index i = 0; i < g.adjacency.rows(); ++i)
    for (Eigen::Index j = 0; j < g.adjacency.cols(); ++j)
      if (g.adjacency(i, j) &&
          std::abs(g.centers(i, 0) - g.centers(j, 0)) > 180.0)
        ++wrap;
  std::cout << "wrote " << cfg.paths.graph_path() << " (" << g.n_nodes()
            << " nodes, k_nn " << g.k_nn << ", mu " << g.mu << ", " << wrap
            << " antimeridian-crossing edges)\n";
  return 0;
}

int cmd_train(const LoadedConfig& lc, const std::string& resume_path) {
  echo_config(lc);
  const RunConfig& cfg = lc.cfg;
  const Dataset ds = load_dataset_checked(cfg.paths.dataset_path(), cfg.data.L);
  const ConditionGraph g = build_graph_for(cfg, ds);

  Checkpoint resume_ck;
  const Checkpoint* resume = nullptr;
  if (!resume_path.empty()) {
    resume_ck = load_checkpoint(resume_path);
    resume = &resume_ck;
  }

  TrainPaths paths;
  paths.checkpoint = cfg.paths.checkpoint_path();
  paths.metrics_csv = cfg.paths.metrics_path();
  const TrainResult r =
      train(ds, g, cfg.model, cfg.train, paths, lc.resolved, resume);

  for (const EpochLog& e : r.log)
    std::printf("epoch %3d  train_loss %.6f  test_rmse %.6f  test_r2 %.4f\n",
                e.epoch, e.train_loss, e.test_rmse, e.test_r2);
  if (r.diverged) {
    std::cerr << "training diverged: " << r.divergence_note
              << " (best checkpoint up to that point is kept)\n";
    return 4;
  }
  std::cout << "best epoch " << r.best_epoch << " test_rmse " << r.best_rmse
            << "; checkpoint " << paths.checkpoint << "; metrics "
            << paths.metrics_csv << "\n";
  return 0;
}

int cmd_eval(const LoadedConfig& lc, std::string ckpt, std::string ds_path,
             const std::string& split) {
  if (ckpt.empty()) ckpt = lc.cfg.paths.checkpoint_path();
  if (ds_path.empty()) ds_path = lc.cfg.paths.dataset_path();
  Dataset ds;
  const LoadedModel lm = load_model(ckpt, ds_path, ds);
  std::cout << "config digest " << config_digest(lm.resolved)
            << " (from checkpoint)\n";
  const PreparedData prep = prepare_data(ds, lm.graph, lm.n_times);
  const std::vector<int> idxs = split_indices(ds, split);
  require(!idxs.empty(), ErrorCode::DataError,
          "split '" + split + "' has no samples");
  const Metrics m = eval_metrics(lm.ck.params, lm.cfg.model, lm.P,
                                 lm.graph.n_nodes(), lm.n_times, ds, prep,
                                 idxs);
  fs::create_directories(lc.cfg.paths.out_dir);
  const std::string out_path = lc.cfg.paths.eval_path();
  write_json_file(out_path, json{{"split", split},
                                 {"rmse", m.rmse},
                                 {"r2", m.r2},
                                 {"n", m.n},
                                 {"checkpoint_epoch", lm.ck.epoch},
                                 {"checkpoint", ckpt}});
  std::printf("%s: rmse %.6f  r2 %.6f  (n=%lld) -> %s\n", split.c_str(),
              m.rmse, m.r2, static_cast<long long>(m.n), out_path.c_str());
  return 0;
}

void write_weight_csv(const std::string& path, const Dataset& ds,
                      const std::vector<int>& idxs,
                      const std::vector<Prediction>& preds, bool intercept) {
  const Eigen::Index d = ds.feature_dim();
  std::vector<std::string> header{"lon", "lat", "t_index"};
  for (Eigen::Index j = 1; j <= d; ++j)
    header.push_back("w_" + std::to_string(j));
  if (intercept) header.push_back("intercept");
  header.push_back("y_hat");
  header.push_back("y_hat_interp");
  Mat rows(Eigen::Index(idxs.size()), Eigen::Index(header.size()));
  for (std::size_t i = 0; i < idxs.size(); ++i) {
    const Sample& s = ds.samples[std::size_t(idxs[i])];
    const Prediction& p = preds[i];
    Eigen::Index c = 0;
    rows(Eigen::Index(i), c++) = s.lon;
    rows(Eigen::Index(i), c++) = s.lat;
    rows(Eigen::Index(i), c++) = double(s.t_index);
    for (Eigen::Index j = 0; j < d; ++j)
      rows(Eigen::Index(i), c++) = p.weights(j);
    if (intercept) rows(Eigen::Index(i), c++) = p.intercept;
    rows(Eigen::Index(i), c++) = p.y_hat;
    rows(Eigen::Index(i), c++) = p.y_hat_interp;
  }
  csv::write_table(path, header, rows);
}

void write_weight_geojson(const std::string& path, const Dataset& ds,
                          const std::vector<int>& idxs,
                          const std::vector<Prediction>& preds,
                          bool intercept) {
  json features = json::array();
  for (std::size_t i = 0; i < idxs.size(); ++i) {
    const Sample& s = ds.samples[std::size_t(idxs[i])];
    const Prediction& p = preds[i];
    json props{{"t_index", s.t_index},
               {"y_hat", p.y_hat},
               {"y_hat_interp", p.y_hat_interp}};
    for (Eigen::Index j = 0; j < p.weights.size(); ++j)
      props["w_" + std::to_string(j + 1)] = p.weights(j);
    if (intercept) props["intercept"] = p.intercept;
    features.push_back(json{{"type", "Feature"},
                            {"geometry",
                             {{"type", "Point"},
                              {"coordinates", json::array({s.lon, s.lat})}}},
                            {"properties", props}});
  }
  write_json_file(path,
                  json{{"type", "FeatureCollection"}, {"features", features}});
}

int cmd_export_weights(const LoadedConfig& lc, std::string ckpt,
                       std::string ds_path, const std::string& split,
                       const std::string& geojson_path) {
  if (ckpt.empty()) ckpt = lc.cfg.paths.checkpoint_path();
  if (ds_path.empty()) ds_path = lc.cfg.paths.dataset_path();
  Dataset ds;
  const LoadedModel lm = load_model(ckpt, ds_path, ds);
  std::cout << "config digest " << config_digest(lm.resolved)
            << " (from checkpoint)\n";
  const PreparedData prep = prepare_data(ds, lm.graph, lm.n_times);
  const std::vector<int> idxs = split_indices(ds, split);
  require(!idxs.empty(), ErrorCode::DataError,
          "split '" + split + "' has no samples");
  const auto preds = evaluate(lm.ck.params, lm.cfg.model, lm.P,
                              lm.graph.n_nodes(), lm.n_times, ds, prep, idxs);
  fs::create_directories(lc.cfg.paths.out_dir);
  const bool intercept = lm.cfg.model.decoder.intercept;
  const std::string csv_path = lc.cfg.paths.weights_path();
  write_weight_csv(csv_path, ds, idxs, preds, intercept);
  std::cout << "wrote " << csv_path << " (" << idxs.size() << " rows)\n";
  if (!geojson_path.empty()) {
    write_weight_geojson(geojson_path, ds, idxs, preds, intercept);
    std::cout << "wrote " << geojson_path << "\n";
  }
  return 0;
}

int cmd_gradcheck(const LoadedConfig& lc, int probes, double tol) {
  echo_config(lc);
  const RunConfig& cfg = lc.cfg;
  auto [ds, field] = generate_synthetic(cfg.data);
  (void)field;
  assign_time_split(ds, cfg.split_stride, cfg.split_offset);
  if (cfg.normalize) zscore_normalize(ds);
  const ConditionGraph g = build_graph_for(cfg, ds);
  int max_t = 0;
  for (const Sample& s : ds.samples) max_t = std::max(max_t, s.t_index);
  const Eigen::Index n_times = max_t + 1;
  const Mat P = propagation_matrix(g);
  const PreparedData prep = prepare_data(ds, g, n_times);
  const Params params =
      init_model_params(cfg.model, g, n_times, cfg.train.seed);
  std::vector<int> batch = ds.train_indices();
  if (int(batch.size()) > cfg.train.batch_size)
    batch.resize(std::size_t(cfg.train.batch_size));
  const GradCheckReport rep =
      gradcheck(params, cfg.model, P, g.n_nodes(), n_times, ds, prep, batch,
                cfg.train.seed, probes, tol);
  for (const GradCheckGroup& grp : rep.groups)
    std::printf("group %-16s max_rel %.3e  mean_rel %.3e  (%d scalars)  %s\n",
                grp.name.c_str(), grp.max_rel, grp.mean_rel, grp.checked,
                grp.pass ? "PASS" : "FAIL");
  std::cout << (rep.pass ? "gradient check PASSED" : "gradient check FAILED")
            << " (tol " << tol << ", " << probes << " probes)\n";
  return rep.pass ? 0 : 4;
}

int cmd_baseline(const LoadedConfig& lc, const std::string& method,
                 double bandwidth, bool search, bool intercept,
                 std::string ds_path) {
  echo_config(lc);
  const RunConfig& cfg = lc.cfg;
  if (ds_path.empty()) ds_path = cfg.paths.dataset_path();
  const Dataset ds = load_dataset_checked(ds_path, cfg.data.L);
  const std::vector<int> train_idx = ds.train_indices();
  const std::vector<int> test_idx = ds.test_indices();
  require(!train_idx.empty() && !test_idx.empty(), ErrorCode::DataError,
          "baseline needs both train and test samples");
  const RegressionData flat_train = window_mean_data(ds, train_idx);
  const RegressionData flat_test = window_mean_data(ds, test_idx);
  const RegressionData avg_train = location_averaged_data(ds, train_idx);

  json out{{"method", method}, {"intercept", intercept}};
  // Train metrics are in-sample: residuals on the rows each method was
  // fitted to (OLS fits the flat train samples, GWR the per-location means).
  // Test metrics are always on the flat held-out samples.
  Vec fit_resid_y, fit_pred, test_pred;
  Mat coef_rows;  // per location: lon,lat,-1,w...,(b),y_hat,y_hat_interp
  const Eigen::Index d = ds.feature_dim();
  const Eigen::Index ncols = 3 + d + (intercept ? 1 : 0) + 2;

  if (method == "ols") {
    const LinFit fit = ols_fit(flat_train, intercept);
    out["ridge_used"] = fit.ridge_fallback;
    out["fit_rows"] = "train_samples";
    fit_resid_y = flat_train.y;
    fit_pred = ols_predict_all(fit, flat_train);
    test_pred = ols_predict_all(fit, flat_test);
    coef_rows = Mat(avg_train.size(), ncols);
    for (Eigen::Index k = 0; k < avg_train.size(); ++k) {
      const double yh = lin_predict(fit, avg_train.X.row(k).transpose());
      Eigen::Index c = 0;
      coef_rows(k, c++) = avg_train.lonlat(k, 0);
      coef_rows(k, c++) = avg_train.lonlat(k, 1);
      coef_rows(k, c++) = -1.0;
      for (Eigen::Index j = 0; j < d; ++j) coef_rows(k, c++) = fit.coef(j);
      if (intercept) coef_rows(k, c++) = fit.coef(d);
      coef_rows(k, c++) = yh;
      coef_rows(k, c++) = yh;
    }
  } else if (method == "gwr") {
    double bw = bandwidth;
    if (search) {
      bw = golden_section_bandwidth(avg_train, flat_test, 0.05, 1.5, intercept);
      std::cout << "golden-section bandwidth " << bw << "\n";
    }
    const GwrModel m = gwr_fit(avg_train, bw, intercept);
    out["bandwidth"] = bw;
    out["ridge_used"] = m.any_ridge();
    out["fit_rows"] = "train_location_means";
    fit_resid_y = avg_train.y;
    fit_pred = gwr_predict_all(m, avg_train);
    test_pred = gwr_predict_all(m, flat_test);
    coef_rows = Mat(m.coefs.rows(), ncols);
    for (Eigen::Index k = 0; k < m.coefs.rows(); ++k) {
      LinFit local;
      local.coef = m.coefs.row(k).transpose();
      local.intercept = intercept;
      const double yh = lin_predict(local, avg_train.X.row(k).transpose());
      Eigen::Index c = 0;
      coef_rows(k, c++) = m.locations(k, 0);
      coef_rows(k, c++) = m.locations(k, 1);
      coef_rows(k, c++) = -1.0;
      for (Eigen::Index j = 0; j < m.coefs.cols(); ++j)
        coef_rows(k, c++) = m.coefs(k, j);
      coef_rows(k, c++) = yh;
      coef_rows(k, c++) = yh;
    }
  } else {
    fail(ErrorCode::ConfigError, "--method must be ols or gwr");
  }

  const Metrics mtr = compute_metrics(fit_resid_y, fit_pred);
  const Metrics mte = compute_metrics(flat_test.y, test_pred);
  out["train"] = json{{"rmse", mtr.rmse}, {"r2", mtr.r2}, {"n", mtr.n}};
  out["test"] = json{{"rmse", mte.rmse}, {"r2", mte.r2}, {"n", mte.n}};

  std::vector<std::string> header{"lon", "lat", "t_index"};
  for (Eigen::Index j = 1; j <= d; ++j)
    header.push_back("w_" + std::to_string(j));
  if (intercept) header.push_back("intercept");
  header.push_back("y_hat");
  header.push_back("y_hat_interp");
  const std::string csv_path =
      cfg.paths.baseline_csv.empty()
          ? cfg.paths.join("", "baseline_" + method + ".csv")
          : cfg.paths.baseline_csv;
  csv::write_table(csv_path, header, coef_rows);
  const std::string json_path = cfg.paths.join("", "baseline_" + method + ".json");
  write_json_file(json_path, out);
  std::printf("%s: fit rmse %.6f r2 %.6f | test rmse %.6f r2 %.6f -> %s\n",
              method.c_str(), mtr.rmse, mtr.r2, mte.rmse, mte.r2,
              json_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatiotemporal heterogeneity pipeline"};
  app.require_subcommand(1);
  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file (defaults used when omitted)");
  app.add_option("--out", g.out_override, "override paths.out_dir");
  app.add_option("--threads", g.threads,
                 "worker threads (default: GEOHET_THREADS or 1)");
  app.add_flag("--deterministic", g.deterministic,
               "bitwise-reproducible single-threaded numerics");

  auto* c_gen = app.add_subcommand("gen", "generate the synthetic dataset");
  std::string truth_csv;
  c_gen->add_option("--truth", truth_csv,
                    "also write the true coefficient field CSV");

  auto* c_graph =
      app.add_subcommand("graph", "build and export the condition graph");

  auto* c_train = app.add_subcommand("train", "train the model");
  std::string resume_path;
  c_train->add_option("--resume", resume_path, "continue from a checkpoint");

  std::string ckpt_path, ds_path, split = "test", geojson_path;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  c_eval->add_option("--checkpoint", ckpt_path, "checkpoint file");
  c_eval->add_option("--dataset", ds_path, "dataset CSV");
  c_eval->add_option("--split", split, "train, test or all (default test)");

  auto* c_export = app.add_subcommand(
      "export-weights", "export per-sample interpretable weights");
  c_export->add_option("--checkpoint", ckpt_path, "checkpoint file");
  c_export->add_option("--dataset", ds_path, "dataset CSV");
  std::string export_split = "all";
  c_export->add_option("--split", export_split,
                       "train, test or all (default all)");
  c_export->add_option("--geojson", geojson_path,
                       "also write a GeoJSON point collection");

  auto* c_gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of the full-model gradients");
  int probes = 100;
  double tol = 1e-4;
  c_gradcheck->add_option("--probes", probes, "random scalars to probe");
  c_gradcheck->add_option("--tol", tol, "max relative error tolerance");

  auto* c_baseline =
      app.add_subcommand("baseline", "fit the OLS or GWR baseline");
  std::string method;
  double bandwidth = 0.35;
  bool search = false, intercept = false;
  c_baseline->add_option("--method", method, "ols or gwr")->required();
  c_baseline->add_option("--bandwidth", bandwidth,
                         "GWR kernel scale, chord units (default 0.35)");
  c_baseline->add_flag("--search", search,
                       "golden-section bandwidth search on held-out RMSE");
  c_baseline->add_flag("--intercept", intercept, "fit an intercept term");
  c_baseline->add_option("--dataset", ds_path, "dataset CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const LoadedConfig lc = load_with_overrides(g);
    if (c_gen->parsed()) return cmd_gen(lc, truth_csv);
    if (c_graph->parsed()) return cmd_graph(lc);
    if (c_train->parsed()) return cmd_train(lc, resume_path);
    if (c_eval->parsed()) return cmd_eval(lc, ckpt_path, ds_path, split);
    if (c_export->parsed())
      return cmd_export_weights(lc, ckpt_path, ds_path, export_split,
                                geojson_path);
    if (c_gradcheck->parsed()) return cmd_gradcheck(lc, probes, tol);
    if (c_baseline->parsed())
      return cmd_baseline(lc, method, bandwidth, search, intercept, ds_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
