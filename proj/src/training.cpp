#include "geohet/training.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "geohet/csv.hpp"

namespace geohet {

void adamw_step(Params& p, const std::vector<Mat>& grads, OptimState& st,
                const AdamWConfig& cfg, double lr) {
  require(grads.size() == p.size() && st.m.size() == p.size(),
          ErrorCode::ShapeMismatch,
          "adamw_step: gradient/state size mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Mat& g = grads[i];
    require(g.allFinite(), ErrorCode::NumericError,
            "non-finite gradient in parameter group '" +
                param_group(p.names[i]) + "' (" + p.names[i] + ")");
    Mat& w = p.values[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat mhat = st.m[i] / bc1;
    const Mat vhat = st.v[i] / bc2;
    w -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps) +
               cfg.weight_decay * w.array())
                  .matrix();
    require(w.allFinite(), ErrorCode::NumericError,
            "non-finite parameter after update: " + p.names[i]);
  }
}

int resolve_threads(int cli_threads, bool deterministic) {
  if (deterministic) return 1;
  if (cli_threads > 0) return cli_threads;
  if (const char* env = std::getenv("GEOHET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    require(end != env && *end == '\0' && v >= 1 && v <= 1024,
            ErrorCode::ConfigError,
            "GEOHET_THREADS must be an integer in [1, 1024]");
    return static_cast<int>(v);
  }
  return 1;
}

std::vector<int> epoch_permutation(std::mt19937_64& rng,
                                   std::vector<int> idxs) {
  std::shuffle(idxs.begin(), idxs.end(), rng);
  return idxs;
}

namespace {

struct ChunkOut {
  std::vector<Mat> grads;
  double total = 0.0, dep = 0.0, interp = 0.0;
  Eigen::Index n = 0;
};

ChunkOut run_chunk(const Params& params, const ModelConfig& cfg, const Mat& P,
                   Eigen::Index n_nodes, Eigen::Index n_times,
                   const Dataset& ds, const PreparedData& prep,
                   const std::vector<int>& idxs) {
  Batch b = make_batch(ds, prep, idxs);
  Tape<double> t;
  auto bp = bind(t, params);
  auto out = forward_batch(t, bp, cfg, P, n_nodes, n_times, b,
                           prep.memory_per_sample);
  t.backward(out.loss.total);
  ChunkOut c;
  c.grads = bp.grads();
  c.total = out.loss.total.val()(0, 0);
  c.dep = out.loss.dep.val()(0, 0);
  c.interp = out.loss.interp.val()(0, 0);
  c.n = b.n_samples;
  return c;
}

}  // namespace

BatchGrads batch_gradients(const Params& params, const ModelConfig& cfg,
                           const Mat& P, Eigen::Index n_nodes,
                           Eigen::Index n_times, const Dataset& ds,
                           const PreparedData& prep,
                           const std::vector<int>& batch_idxs, int threads) {
  require(!batch_idxs.empty(), ErrorCode::ConfigError,
          "batch_gradients: empty batch");
  const std::size_t B = batch_idxs.size();
  const std::size_t nchunks =
      std::min<std::size_t>(std::size_t(std::max(threads, 1)), B);
  std::vector<std::vector<int>> chunks(nchunks);
  const std::size_t base = B / nchunks, rem = B % nchunks;
  std::size_t at = 0;
  for (std::size_t c = 0; c < nchunks; ++c) {
    const std::size_t len = base + (c < rem ? 1 : 0);
    chunks[c].assign(batch_idxs.begin() + long(at),
                     batch_idxs.begin() + long(at + len));
    at += len;
  }

  std::vector<ChunkOut> outs(nchunks);
  if (nchunks == 1) {
    outs[0] = run_chunk(params, cfg, P, n_nodes, n_times, ds, prep, chunks[0]);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nchunks);
    std::vector<std::exception_ptr> errors(nchunks);
    for (std::size_t c = 0; c < nchunks; ++c)
      pool.emplace_back([&, c] {
        try {
          outs[c] =
              run_chunk(params, cfg, P, n_nodes, n_times, ds, prep, chunks[c]);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // chunk losses are means over the chunk; recombine by sample count, in
  // chunk order, so the result is reproducible for a fixed thread count
  BatchGrads out;
  out.grads.reserve(params.size());
  for (const auto& w : params.values)
    out.grads.push_back(Mat::Zero(w.rows(), w.cols()));
  for (std::size_t c = 0; c < nchunks; ++c) {
    const double share = double(outs[c].n) / double(B);
    for (std::size_t i = 0; i < params.size(); ++i)
      out.grads[i] += share * outs[c].grads[i];
    out.total += share * outs[c].total;
    out.dep += share * outs[c].dep;
    out.interp += share * outs[c].interp;
  }
  return out;
}

void write_metric_log(const std::string& path,
                      const std::vector<EpochLog>& log) {
  Mat rows(Eigen::Index(log.size()), 6);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const EpochLog& e = log[i];
    rows.row(Eigen::Index(i)) << double(e.epoch), e.train_loss, e.l_dep,
        e.l_interp, e.test_rmse, e.test_r2;
  }
  csv::write_table(path,
                   {"epoch", "train_loss", "L_dep", "L_interp", "test_rmse",
                    "test_r2"},
                   rows);
}

TrainResult train(const Dataset& ds, const ConditionGraph& graph,
                  const ModelConfig& cfg, const TrainConfig& tc,
                  const TrainPaths& paths, const nlohmann::json& config_echo,
                  const Checkpoint* resume) {
  cfg.validate();
  tc.validate();
  const std::vector<int> train_idx = ds.train_indices();
  const std::vector<int> test_idx = ds.test_indices();
  require(!train_idx.empty(), ErrorCode::DataError,
          "train: dataset has no training samples");
  require(!test_idx.empty(), ErrorCode::DataError,
          "train: dataset has no held-out samples");
  int max_t = 0;
  for (const Sample& s : ds.samples) max_t = std::max(max_t, s.t_index);
  const Eigen::Index n_times = max_t + 1;
  const Eigen::Index n_nodes = graph.n_nodes();
  const Mat P = propagation_matrix(graph);
  const PreparedData prep = prepare_data(ds, graph, n_times);

  TrainResult r;
  r.params = init_model_params(cfg, graph, n_times, tc.seed);
  r.opt.init(r.params);
  r.best_rmse = std::numeric_limits<double>::infinity();

  std::mt19937_64 shuffle_rng(tc.seed ^ 0xA076'1D64'78BD'642FULL);

  int start_epoch = 0;
  if (resume) {
    require(resume->params.names == r.params.names, ErrorCode::ConfigError,
            "resume: checkpoint parameters do not match the model config");
    for (std::size_t i = 0; i < r.params.size(); ++i)
      require(resume->params.values[i].rows() == r.params.values[i].rows() &&
                  resume->params.values[i].cols() == r.params.values[i].cols(),
              ErrorCode::ConfigError,
              "resume: shape mismatch for parameter '" + r.params.names[i] +
                  "'");
    require(resume->epoch < tc.epochs, ErrorCode::ConfigError,
            "resume: checkpoint epoch is already >= train.epochs");
    r.params = resume->params;
    if (resume->has_opt)
      r.opt = resume->opt;
    else
      r.opt.init(r.params);
    r.best_rmse = resume->best_rmse;
    r.best_epoch = int(resume->epoch);
    r.best_params = r.params;
    start_epoch = int(resume->epoch);
    if (!resume->rng_state.empty()) {
      std::istringstream ss(resume->rng_state);
      ss >> shuffle_rng;
      require(!ss.fail(), ErrorCode::DataError,
              "resume: malformed RNG state in checkpoint");
    }
  }

  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    const double lr = tc.optim.lr_at(epoch);
    const std::vector<int> order = epoch_permutation(shuffle_rng, train_idx);
    double sum_total = 0.0, sum_dep = 0.0, sum_interp = 0.0;
    bool bad = false;
    std::string bad_note;
    for (std::size_t at = 0; at < order.size() && !bad;
         at += std::size_t(tc.batch_size)) {
      const std::size_t n =
          std::min(std::size_t(tc.batch_size), order.size() - at);
      std::vector<int> batch(order.begin() + long(at),
                             order.begin() + long(at + n));
      try {
        BatchGrads bg = batch_gradients(r.params, cfg, P, n_nodes, n_times, ds,
                                        prep, batch, tc.threads);
        if (!std::isfinite(bg.total)) {
          bad = true;
          bad_note = "non-finite training loss";
          break;
        }
        adamw_step(r.params, bg.grads, r.opt, tc.optim, lr);
        sum_total += bg.total * double(n);
        sum_dep += bg.dep * double(n);
        sum_interp += bg.interp * double(n);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NumericError) {
          bad = true;
          bad_note = e.what();
          break;
        }
        throw;
      }
    }
    if (bad) {
      r.diverged = true;
      r.divergence_note = bad_note;
      break;
    }

    EpochLog el;
    el.epoch = epoch + 1;
    el.train_loss = sum_total / double(order.size());
    el.l_dep = sum_dep / double(order.size());
    el.l_interp = sum_interp / double(order.size());
    const Metrics mt = eval_metrics(r.params, cfg, P, n_nodes, n_times, ds,
                                    prep, test_idx);
    el.test_rmse = mt.rmse;
    el.test_r2 = mt.r2;
    r.log.push_back(el);

    if (std::isfinite(mt.rmse) && mt.rmse < r.best_rmse) {
      r.best_rmse = mt.rmse;
      r.best_epoch = epoch + 1;
      r.best_params = r.params;
      if (!paths.checkpoint.empty()) {
        Checkpoint ck;
        ck.params = r.params;
        ck.opt = r.opt;
        ck.has_opt = true;
        ck.epoch = epoch + 1;
        ck.step = r.opt.step;
        ck.best_rmse = r.best_rmse;
        std::ostringstream ss;
        ss << shuffle_rng;
        ck.rng_state = ss.str();
        ck.config = config_echo;
        save_checkpoint(paths.checkpoint, ck);
      }
    }
  }

  if (r.best_epoch == 0) {  // never improved; keep final state as "best"
    r.best_params = r.params;
    if (!r.log.empty()) r.best_rmse = r.log.back().test_rmse;
  }
  if (!paths.metrics_csv.empty()) write_metric_log(paths.metrics_csv, r.log);
  return r;
}

// --- checkpoints -------------------------------------------------------------

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  require(bool(is), ErrorCode::IoError, "checkpoint: truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

void write_mat(std::ostream& os, const Mat& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           std::streamsize(sizeof(double)) * m.size());
}

void read_mat(std::istream& is, Mat& m) {
  is.read(reinterpret_cast<char*>(m.data()),
          std::streamsize(sizeof(double)) * m.size());
  require(bool(is), ErrorCode::IoError, "checkpoint: truncated payload");
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["epoch"] = ck.epoch;
  header["step"] = ck.step;
  header["best_rmse"] = ck.best_rmse;
  header["rng_state"] = ck.rng_state;
  header["has_opt"] = ck.has_opt;
  header["config"] = ck.config;
  nlohmann::json shapes = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    shapes.push_back({{"name", ck.params.names[i]},
                      {"rows", ck.params.values[i].rows()},
                      {"cols", ck.params.values[i].cols()}});
  header["params"] = shapes;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), ErrorCode::IoError,
          "checkpoint: cannot open for writing: " + path);
  put_u64_le(os, hs.size());
  os.write(hs.data(), std::streamsize(hs.size()));
  for (const Mat& m : ck.params.values) write_mat(os, m);
  if (ck.has_opt) {
    require(ck.opt.m.size() == ck.params.size() &&
                ck.opt.v.size() == ck.params.size(),
            ErrorCode::ShapeMismatch,
            "checkpoint: optimizer state does not match parameters");
    for (const Mat& m : ck.opt.m) write_mat(os, m);
    for (const Mat& m : ck.opt.v) write_mat(os, m);
  }
  require(os.good(), ErrorCode::IoError, "checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorCode::IoError, "checkpoint: cannot open: " + path);
  const std::uint64_t hlen = get_u64_le(is);
  require(hlen > 0 && hlen < (1ull << 24), ErrorCode::IoError,
          "checkpoint: implausible header length");
  std::string hs(hlen, '\0');
  is.read(hs.data(), std::streamsize(hlen));
  require(bool(is), ErrorCode::IoError, "checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError,
         std::string("checkpoint: malformed header: ") + e.what());
  }
  require(header.value("format_version", -1) == 1, ErrorCode::IoError,
          "checkpoint: unsupported format version");

  Checkpoint ck;
  ck.epoch = header.value("epoch", 0L);
  ck.step = header.value("step", 0L);
  ck.best_rmse = header.value("best_rmse", 0.0);
  ck.rng_state = header.value("rng_state", std::string());
  ck.has_opt = header.value("has_opt", false);
  if (header.contains("config")) ck.config = header["config"];
  for (const auto& s : header.at("params")) {
    const std::string name = s.at("name").get<std::string>();
    const Eigen::Index rows = s.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = s.at("cols").get<Eigen::Index>();
    require(rows >= 0 && cols >= 0, ErrorCode::IoError,
            "checkpoint: negative shape for " + name);
    ck.params.add(name, Mat::Zero(rows, cols));
  }
  for (Mat& m : ck.params.values) read_mat(is, m);
  if (ck.has_opt) {
    ck.opt.init(ck.params);
    ck.opt.step = ck.step;
    for (Mat& m : ck.opt.m) read_mat(is, m);
    for (Mat& m : ck.opt.v) read_mat(is, m);
  }
  return ck;
}

// --- gradient checker --------------------------------------------------------

std::string param_group(const std::string& name) {
  if (name.rfind("decoder.target", 0) == 0) return "decoder.target";
  if (name.rfind("decoder.interp", 0) == 0) return "decoder.interp";
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

GradCheckReport gradcheck(const Params& params, const ModelConfig& cfg,
                          const Mat& P, Eigen::Index n_nodes,
                          Eigen::Index n_times, const Dataset& ds,
                          const PreparedData& prep,
                          const std::vector<int>& batch_idxs,
                          std::uint64_t probe_seed, int probes, double tol,
                          const std::string& corrupt_group) {
  BatchGrads bg = batch_gradients(params, cfg, P, n_nodes, n_times, ds, prep,
                                  batch_idxs, 1);
  if (!corrupt_group.empty())
    for (std::size_t i = 0; i < params.size(); ++i)
      if (param_group(params.names[i]) == corrupt_group)
        bg.grads[i].array() += 0.05;  // simulated broken backward rule

  Params work = params;  // mutated in place for the centered evaluations
  auto loss_at = [&]() {
    Batch b = make_batch(ds, prep, batch_idxs);
    Tape<double> t(false);
    auto bp = bind(t, work);
    auto out = forward_batch(t, bp, cfg, P, n_nodes, n_times, b,
                             prep.memory_per_sample);
    return out.loss.total.val()(0, 0);
  };

  // deterministic probe set over the flat scalar index space
  const Eigen::Index total = params.scalar_count();
  std::mt19937_64 rng(probe_seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, total - 1);

  std::map<std::string, GradCheckGroup> groups;
  for (const auto& name : params.names) {
    const std::string g = param_group(name);
    if (!groups.count(g)) groups[g].name = g;
  }

  const double h = 1e-5;
  for (int n = 0; n < probes; ++n) {
    Eigen::Index flat = pick(rng);
    std::size_t pi = 0;
    while (flat >= params.values[pi].size()) {
      flat -= params.values[pi].size();
      ++pi;
    }
    double* slot = work.values[pi].data() + flat;
    const double keep = *slot;
    *slot = keep + h;
    const double up = loss_at();
    *slot = keep - h;
    const double dn = loss_at();
    *slot = keep;
    const double fd = (up - dn) / (2.0 * h);
    const double g = bg.grads[pi].data()[flat];
    const double rel =
        std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6});
    GradCheckGroup& grp = groups[param_group(params.names[pi])];
    grp.checked += 1;
    grp.mean_rel += rel;
    grp.max_rel = std::max(grp.max_rel, rel);
  }

  GradCheckReport report;
  for (auto& [name, grp] : groups) {
    if (grp.checked > 0) grp.mean_rel /= double(grp.checked);
    grp.pass = grp.max_rel <= tol;
    report.pass = report.pass && grp.pass;
    report.groups.push_back(grp);
  }
  return report;
}

}  // namespace geohet
