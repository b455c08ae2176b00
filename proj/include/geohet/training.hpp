#pragma once

// AdamW with decoupled weight decay, the training loop with its two-value
// learning-rate schedule, binary checkpoints (bitwise round trip including
// optimizer state), and the finite-difference gradient checker.

#include <json.hpp>
#include <random>
#include <string>
#include <vector>

#include "geohet/geodata.hpp"
#include "geohet/model.hpp"
#include "geohet/params.hpp"

namespace geohet {

struct AdamWConfig {
  double lr = 0.001;
  double lr_decayed = 0.0001;
  int decay_epoch = 10;  // epochs [0, decay_epoch) use lr, the rest lr_decayed
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    require(lr >= 0.0 && lr_decayed >= 0.0, ErrorCode::ConfigError,
            "learning rates must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            ErrorCode::ConfigError, "betas must lie in [0, 1)");
    require(eps > 0.0, ErrorCode::ConfigError, "optimizer eps must be > 0");
    require(weight_decay >= 0.0, ErrorCode::ConfigError,
            "weight decay must be non-negative");
    require(decay_epoch >= 0, ErrorCode::ConfigError,
            "decay epoch must be >= 0");
  }

  double lr_at(int epoch) const { return epoch < decay_epoch ? lr : lr_decayed; }
};

struct OptimState {
  std::vector<Mat> m, v;  // first/second moments, parameter order
  long step = 0;

  void init(const Params& p) {
    m.clear();
    v.clear();
    step = 0;
    for (const auto& w : p.values) {
      m.push_back(Mat::Zero(w.rows(), w.cols()));
      v.push_back(Mat::Zero(w.rows(), w.cols()));
    }
  }
};

// One decoupled-decay update; `lr` comes from the schedule.
void adamw_step(Params& p, const std::vector<Mat>& grads, OptimState& st,
                const AdamWConfig& cfg, double lr);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  std::uint64_t seed = 42;
  int threads = 1;           // resolved by the caller (flag/env/deterministic)
  AdamWConfig optim;

  void validate() const {
    require(epochs >= 1, ErrorCode::ConfigError, "epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::ConfigError, "batch_size must be >= 1");
    require(threads >= 1, ErrorCode::ConfigError, "threads must be >= 1");
    optim.validate();
  }
};

// thread resolution: explicit flag > GEOHET_THREADS > 1; deterministic runs
// always use one thread
int resolve_threads(int cli_threads, bool deterministic);

// Seeded epoch shuffle (a permutation of the given indices).
std::vector<int> epoch_permutation(std::mt19937_64& rng, std::vector<int> idxs);

// Joint gradients of the weighted batch loss, averaged over the batch.  With
// threads > 1 the batch splits into contiguous chunks, one tape per chunk,
// and chunk gradients are combined in chunk order (deterministic for a fixed
// thread count).
struct BatchGrads {
  std::vector<Mat> grads;
  double total = 0.0, dep = 0.0, interp = 0.0;
};
BatchGrads batch_gradients(const Params& params, const ModelConfig& cfg,
                           const Mat& P, Eigen::Index n_nodes,
                           Eigen::Index n_times, const Dataset& ds,
                           const PreparedData& prep,
                           const std::vector<int>& batch_idxs, int threads);

struct EpochLog {
  int epoch = 0;  // 1-based in logs
  double train_loss = 0.0, l_dep = 0.0, l_interp = 0.0;
  double test_rmse = 0.0, test_r2 = 0.0;
};

struct TrainResult {
  Params params;           // final parameters
  Params best_params;      // parameters at the best test RMSE
  OptimState opt;
  std::vector<EpochLog> log;
  int best_epoch = 0;      // 1-based; 0 = never improved
  double best_rmse = 0.0;
  bool diverged = false;
  std::string divergence_note;
};

struct TrainPaths {
  std::string checkpoint;   // best checkpoint, written whenever RMSE improves
  std::string metrics_csv;  // per-epoch log
};

struct Checkpoint;  // below

// Full training run.  `config_echo` is embedded in checkpoints so they are
// self-describing.  The graph must already be built from train locations.
// With `resume`, parameters / optimizer / shuffle RNG / epoch counter pick up
// from the checkpoint and epochs continue up to tc.epochs.
TrainResult train(const Dataset& ds, const ConditionGraph& graph,
                  const ModelConfig& cfg, const TrainConfig& tc,
                  const TrainPaths& paths, const nlohmann::json& config_echo,
                  const Checkpoint* resume = nullptr);

void write_metric_log(const std::string& path, const std::vector<EpochLog>& log);

// --- checkpoints -----------------------------------------------------------
// Layout: [u64 little-endian header length][JSON header][raw f64 payload].
// The payload holds every parameter matrix column-major in parameter order,
// then (when present) the optimizer's m and v in the same order.  Doubles are
// written verbatim, so save/load round trips are bitwise.

struct Checkpoint {
  Params params;
  OptimState opt;
  bool has_opt = false;
  long epoch = 0;
  long step = 0;
  double best_rmse = 0.0;
  std::string rng_state;
  nlohmann::json config;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// --- gradient checker -------------------------------------------------------

struct GradCheckGroup {
  std::string name;
  double max_rel = 0.0, mean_rel = 0.0;
  int checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  bool pass = true;
};

// Compares reverse-mode gradients of the batch loss against central finite
// differences (h = 1e-5) on `probes` randomly chosen scalars, reported per
// parameter group.  `corrupt_group` (test fixture) biases that group's
// analytic gradients so the checker's localization can itself be verified.
GradCheckReport gradcheck(const Params& params, const ModelConfig& cfg,
                          const Mat& P, Eigen::Index n_nodes,
                          Eigen::Index n_times, const Dataset& ds,
                          const PreparedData& prep,
                          const std::vector<int>& batch_idxs,
                          std::uint64_t probe_seed, int probes = 100,
                          double tol = 1e-4,
                          const std::string& corrupt_group = "");

// group of a parameter name: "stcg", "encoder", "condenc", "decoder.target"
// or "decoder.interp"
std::string param_group(const std::string& name);

}  // namespace geohet
