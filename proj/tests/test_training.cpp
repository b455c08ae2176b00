#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>

#include "geohet/csv.hpp"
#include "geohet/training.hpp"

using namespace geohet;

namespace {

struct Fixture {
  Dataset ds;
  ConditionGraph graph;
  ModelConfig cfg;
  Mat P;
  PreparedData prep;
  Eigen::Index n_nodes = 0, n_times = 0;
};

Fixture toy_fixture(std::uint64_t seed = 42) {
  Fixture f;
  GenConfig gc;
  gc.seed = seed;
  gc.n_locations = 40;
  gc.n_times = 6;
  gc.L = 4;
  gc.D = 3;
  gc.field_order = 1;
  f.ds = generate_synthetic(gc).first;
  assign_time_split(f.ds, 6, 3);
  zscore_normalize(f.ds);

  Mat pts(Eigen::Index(f.ds.size()), 2);
  for (std::size_t i = 0; i < f.ds.size(); ++i)
    pts.row(Eigen::Index(i)) << f.ds.samples[i].lon, f.ds.samples[i].lat;
  KernelParams kp;
  kp.k_nn = 2;
  WalkParams wp;
  wp.walks_per_node = 4;
  wp.walk_length = 6;
  wp.window = 2;
  wp.epochs = 1;
  f.graph = build_graph(pts, 5, kp, 4, seed, wp);

  f.cfg.encoder.window_len = 4;
  f.cfg.encoder.feature_dim = 3;
  f.cfg.encoder.d_model = 8;
  f.cfg.encoder.n_blocks = 1;
  f.cfg.encoder.ffn_hidden = 8;
  f.cfg.condenc.d_cond = 4;
  f.cfg.decoder.d_model = 8;
  f.cfg.decoder.d_cond = 4;
  f.cfg.decoder.feature_dim = 3;
  f.cfg.decoder.ffn_hidden = 8;
  f.cfg.k_clusters = 5;
  f.cfg.kernel = kp;

  f.n_nodes = f.graph.n_nodes();
  f.n_times = 6;
  f.P = propagation_matrix(f.graph);
  f.prep = prepare_data(f.ds, f.graph, f.n_times);
  return f;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/geohet_test_") + stem + "_" +
         std::to_string(std::rand()) + ".bin";
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("adamw hand examples") {
  SUBCASE("zero gradient and zero decay change nothing") {
    Params p;
    p.add("w", Mat::Constant(2, 2, 1.5));
    OptimState st;
    st.init(p);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(p, {Mat::Zero(2, 2)}, st, cfg, cfg.lr);
    CHECK((p.at("w").array() == 1.5).all());
    CHECK(st.step == 1);
  }
  SUBCASE("zero gradient with decay shrinks by 1 - lr*wd") {
    Params p;
    p.add("w", Mat::Constant(1, 1, 2.0));
    OptimState st;
    st.init(p);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    adamw_step(p, {Mat::Zero(1, 1)}, st, cfg, cfg.lr);
    CHECK(p.at("w")(0, 0) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5))
                                 .epsilon(1e-15));
  }
  SUBCASE("one bias-corrected step at theta=1, g=1") {
    Params p;
    p.add("w", Mat::Constant(1, 1, 1.0));
    OptimState st;
    st.init(p);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(p, {Mat::Constant(1, 1, 1.0)}, st, cfg, cfg.lr);
    // mhat = vhat = 1 after bias correction -> theta = 1 - lr/(1 + eps)
    CHECK(p.at("w")(0, 0) == doctest::Approx(1.0 - 0.001 / (1.0 + 1e-8))
                                 .epsilon(1e-12));
    CHECK(p.at("w")(0, 0) == doctest::Approx(0.999).epsilon(1e-6));
  }
  SUBCASE("non-finite gradients name the parameter group") {
    Params p;
    p.add("encoder.embed.W", Mat::Ones(1, 1));
    OptimState st;
    st.init(p);
    AdamWConfig cfg;
    Mat g = Mat::Constant(1, 1, std::numeric_limits<double>::quiet_NaN());
    try {
      adamw_step(p, {g}, st, cfg, cfg.lr);
      FAIL("NaN gradient accepted");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NumericError);
      CHECK(std::string(e.what()).find("encoder") != std::string::npos);
    }
  }
}

TEST_CASE("learning-rate schedule emits exactly two values") {
  AdamWConfig cfg;
  for (int e = 0; e < 20; ++e)
    CHECK(cfg.lr_at(e) == (e < 10 ? 0.001 : 0.0001));
}

TEST_CASE("epoch shuffles are seeded permutations") {
  std::vector<int> idxs = {3, 1, 4, 1, 5, 9, 2, 6};  // duplicates allowed
  std::mt19937_64 a(7), b(7), c(8);
  auto pa = epoch_permutation(a, idxs);
  auto pb = epoch_permutation(b, idxs);
  auto pc = epoch_permutation(c, idxs);
  CHECK(pa == pb);
  CHECK(pa != idxs);  // astronomically unlikely to be the identity twice
  auto sa = pa, si = idxs;
  std::sort(sa.begin(), sa.end());
  std::sort(si.begin(), si.end());
  CHECK(sa == si);  // multiset preserved: every sample visited exactly once
  (void)pc;
}

TEST_CASE("thread resolution order: deterministic, flag, env, default") {
  unsetenv("GEOHET_THREADS");
  CHECK(resolve_threads(0, false) == 1);
  CHECK(resolve_threads(4, false) == 4);
  CHECK(resolve_threads(4, true) == 1);
  setenv("GEOHET_THREADS", "3", 1);
  CHECK(resolve_threads(0, false) == 3);
  CHECK(resolve_threads(5, false) == 5);  // flag beats env
  CHECK(resolve_threads(0, true) == 1);   // deterministic beats everything
  setenv("GEOHET_THREADS", "zebra", 1);
  CHECK_THROWS_AS(resolve_threads(0, false), Error);
  setenv("GEOHET_THREADS", "0", 1);
  CHECK_THROWS_AS(resolve_threads(0, false), Error);
  unsetenv("GEOHET_THREADS");
}

TEST_CASE("perfect predictions produce exactly zero gradients") {
  Fixture f = toy_fixture();
  f.cfg.decoder.w_interp = 0.0;  // target head only; make its fit perfect
  std::vector<int> batch = {0, 1, 2, 3};
  Params params = init_model_params(f.cfg, f.graph, f.n_times, 42);

  // first pass reads off the model's own predictions
  Batch b = make_batch(f.ds, f.prep, batch);
  Tape<double> probe(false);
  auto bp0 = bind(probe, params);
  auto out0 = forward_batch(probe, bp0, f.cfg, f.P, f.n_nodes, f.n_times, b,
                            f.prep.memory_per_sample);
  Mat fitted = out0.decode.y_hat.val();

  // second pass trains against those predictions as the target
  Dataset ds2 = f.ds;
  for (std::size_t i = 0; i < batch.size(); ++i)
    ds2.samples[std::size_t(batch[i])].target = fitted(Eigen::Index(i), 0);
  PreparedData prep2 = prepare_data(ds2, f.graph, f.n_times);
  BatchGrads bg = batch_gradients(params, f.cfg, f.P, f.n_nodes, f.n_times,
                                  ds2, prep2, batch, 1);
  CHECK(bg.total == 0.0);
  for (const Mat& g : bg.grads) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("chunked gradients agree with the single-tape batch") {
  Fixture f = toy_fixture();
  std::vector<int> batch = {0, 5, 9, 14, 21, 33, 47, 58};
  Params params = init_model_params(f.cfg, f.graph, f.n_times, 1);
  BatchGrads one = batch_gradients(params, f.cfg, f.P, f.n_nodes, f.n_times,
                                   f.ds, f.prep, batch, 1);
  BatchGrads three = batch_gradients(params, f.cfg, f.P, f.n_nodes, f.n_times,
                                     f.ds, f.prep, batch, 3);
  CHECK(one.total == doctest::Approx(three.total).epsilon(1e-12));
  for (std::size_t i = 0; i < one.grads.size(); ++i) {
    const double scale =
        std::max(1.0, one.grads[i].cwiseAbs().maxCoeff());
    CHECK((one.grads[i] - three.grads[i]).cwiseAbs().maxCoeff() / scale <=
          1e-12);
  }
}

TEST_CASE("checkpoints round trip bitwise, optimizer state included") {
  Fixture f = toy_fixture();
  Params params = init_model_params(f.cfg, f.graph, f.n_times, 9);
  OptimState st;
  st.init(params);
  // drive a couple of real steps so the moments are nonzero
  std::vector<int> batch = {0, 1, 2, 3, 4, 5};
  AdamWConfig ocfg;
  for (int it = 0; it < 2; ++it) {
    BatchGrads bg = batch_gradients(params, f.cfg, f.P, f.n_nodes, f.n_times,
                                    f.ds, f.prep, batch, 1);
    adamw_step(params, bg.grads, st, ocfg, ocfg.lr);
  }

  Checkpoint ck;
  ck.params = params;
  ck.opt = st;
  ck.has_opt = true;
  ck.epoch = 2;
  ck.step = st.step;
  ck.best_rmse = 0.75;
  ck.rng_state = "12345 678";
  ck.config = {{"note", "toy"}, {"d_model", 8}};

  const std::string path = temp_path("ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.epoch == 2);
  CHECK(back.step == st.step);
  CHECK(back.best_rmse == 0.75);
  CHECK(back.rng_state == "12345 678");
  CHECK(back.has_opt);
  CHECK(back.config.at("d_model").get<int>() == 8);
  REQUIRE(back.params.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(back.params.names[i] == params.names[i]);
    CHECK(std::memcmp(back.params.values[i].data(), params.values[i].data(),
                      sizeof(double) * std::size_t(params.values[i].size())) ==
          0);
    CHECK(std::memcmp(back.opt.m[i].data(), st.m[i].data(),
                      sizeof(double) * std::size_t(st.m[i].size())) == 0);
    CHECK(std::memcmp(back.opt.v[i].data(), st.v[i].data(),
                      sizeof(double) * std::size_t(st.v[i].size())) == 0);
  }

  // saving the loaded checkpoint again reproduces the file byte for byte
  const std::string path2 = temp_path("ckpt2");
  save_checkpoint(path2, back);
  CHECK(slurp(path) == slurp(path2));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint loader rejects damaged files") {
  const std::string path = temp_path("bad");
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/nowhere.bin"), Error);
}

TEST_CASE("zero learning rate and zero decay freeze the parameters") {
  Fixture f = toy_fixture();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.seed = 11;
  tc.optim.lr = 0.0;
  tc.optim.lr_decayed = 0.0;
  tc.optim.weight_decay = 0.0;
  TrainResult r = train(f.ds, f.graph, f.cfg, tc, {}, nlohmann::json::object());
  Params fresh = init_model_params(f.cfg, f.graph, f.n_times, tc.seed);
  REQUIRE(r.params.size() == fresh.size());
  for (std::size_t i = 0; i < fresh.size(); ++i)
    CHECK((r.params.values[i] - fresh.values[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fixed seeds reproduce training bitwise") {
  Fixture f = toy_fixture();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  tc.seed = 5;
  const std::string ck1 = temp_path("det1"), ck2 = temp_path("det2");
  TrainResult a = train(f.ds, f.graph, f.cfg, tc, {ck1, ""},
                        nlohmann::json::object());
  TrainResult b = train(f.ds, f.graph, f.cfg, tc, {ck2, ""},
                        nlohmann::json::object());
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);
    CHECK(a.log[i].l_dep == b.log[i].l_dep);
    CHECK(a.log[i].l_interp == b.log[i].l_interp);
    CHECK(a.log[i].test_rmse == b.log[i].test_rmse);
    CHECK(a.log[i].test_r2 == b.log[i].test_r2);
  }
  CHECK(slurp(ck1) == slurp(ck2));
  std::remove(ck1.c_str());
  std::remove(ck2.c_str());
}

TEST_CASE("training reduces the loss on the toy problem") {
  Fixture f = toy_fixture();
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 32;
  tc.seed = 3;
  TrainResult r = train(f.ds, f.graph, f.cfg, tc, {}, nlohmann::json::object());
  REQUIRE(r.log.size() == 4);
  CHECK(!r.diverged);
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
  CHECK(r.best_epoch >= 1);
}

TEST_CASE("metric logs are written with full precision") {
  std::vector<EpochLog> log(2);
  log[0] = {1, 0.5, 0.25, 0.25, 1.0, 0.125};
  log[1] = {2, 1.0 / 3.0, 0.1, 0.7, 0.9, -0.25};
  const std::string path = temp_path("mlog");
  write_metric_log(path, log);
  csv::Table t = csv::read_table(path);
  CHECK(t.header == std::vector<std::string>{"epoch", "train_loss", "L_dep",
                                             "L_interp", "test_rmse",
                                             "test_r2"});
  CHECK(t.rows(1, 1) == 1.0 / 3.0);  // %.17g survives the round trip
  CHECK(t.rows(1, 5) == -0.25);
  std::remove(path.c_str());
}

TEST_CASE("gradient checker") {
  Fixture f = toy_fixture();
  Params params = init_model_params(f.cfg, f.graph, f.n_times, 7);
  std::vector<int> batch = {0, 7, 19, 28};

  SUBCASE("all groups pass on the toy config") {
    auto report = gradcheck(params, f.cfg, f.P, f.n_nodes, f.n_times, f.ds,
                            f.prep, batch, 99, 100, 1e-4);
    CHECK(report.pass);
    CHECK(report.groups.size() == 5);
    for (const auto& g : report.groups) {
      INFO("group ", g.name, " max_rel ", g.max_rel);
      CHECK(g.pass);
      CHECK(g.max_rel <= 1e-4);
    }
  }
  SUBCASE("a corrupted rule is localized to its group") {
    auto report = gradcheck(params, f.cfg, f.P, f.n_nodes, f.n_times, f.ds,
                            f.prep, batch, 99, 100, 1e-4, "condenc");
    CHECK(!report.pass);
    for (const auto& g : report.groups) {
      if (g.name == "condenc")
        CHECK(!g.pass);
      else
        CHECK(g.pass);
    }
  }
  SUBCASE("reports are deterministic under a fixed seed") {
    auto r1 = gradcheck(params, f.cfg, f.P, f.n_nodes, f.n_times, f.ds, f.prep,
                        batch, 99, 40, 1e-4);
    auto r2 = gradcheck(params, f.cfg, f.P, f.n_nodes, f.n_times, f.ds, f.prep,
                        batch, 99, 40, 1e-4);
    REQUIRE(r1.groups.size() == r2.groups.size());
    for (std::size_t i = 0; i < r1.groups.size(); ++i) {
      CHECK(r1.groups[i].max_rel == r2.groups[i].max_rel);
      CHECK(r1.groups[i].mean_rel == r2.groups[i].mean_rel);
      CHECK(r1.groups[i].checked == r2.groups[i].checked);
    }
  }
}

TEST_CASE("parameter groups are named by their prefixes") {
  CHECK(param_group("stcg.node_embed") == "stcg");
  CHECK(param_group("encoder.block0.temporal.Wq") == "encoder");
  CHECK(param_group("condenc.lstm.Wx") == "condenc");
  CHECK(param_group("decoder.target.head.W") == "decoder.target");
  CHECK(param_group("decoder.interp.Wv") == "decoder.interp");
}
