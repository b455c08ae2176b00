#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "geohet/decoder.hpp"

using namespace geohet;

namespace {

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

DecoderConfig tiny_cfg() {
  DecoderConfig cfg;
  cfg.d_model = 8;
  cfg.d_cond = 5;
  cfg.feature_dim = 3;
  cfg.ffn_hidden = 6;
  return cfg;
}

Params tiny_params(const DecoderConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Params p;
  add_decoder_params(p, cfg, rng);
  return p;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// full plain-Eigen evaluation of one branch on a single sample
Mat branch_oracle(const Params& p, const std::string& prefix, const Mat& tokens,
                  const Mat& memory, Eigen::Index d_model) {
  Row mem_mean = memory.colwise().mean();
  Mat q = tokens * p.at(prefix + ".Wq");
  Row gate = (mem_mean * p.at(prefix + ".Wg")).unaryExpr([](double v) {
    return sigm(v);
  });
  Mat k = (tokens * p.at(prefix + ".Wk")).array().rowwise() * gate.array();
  Row vrow = mem_mean * p.at(prefix + ".Wv");
  Mat logits = q * k.transpose() / std::sqrt(double(d_model));
  Mat alpha(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Row e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    alpha.row(i) = e / e.sum();
  }
  Mat v = Mat::Zero(tokens.rows(), vrow.cols());
  v.rowwise() = vrow;
  Mat h = tokens + alpha * v;
  Mat f1 = ((h * p.at(prefix + ".ffn.W1")).rowwise() +
            p.at(prefix + ".ffn.b1").row(0))
               .unaryExpr([](double x) {
                 return x > 0.0 ? x + 1.0 : std::exp(x);
               });
  Mat f2 =
      (f1 * p.at(prefix + ".ffn.W2")).rowwise() + p.at(prefix + ".ffn.b2").row(0);
  h += f2;
  Row pooled = h.colwise().mean();
  return (pooled * p.at(prefix + ".head.W")).rowwise() +
         p.at(prefix + ".head.b").row(0);
}

}  // namespace

TEST_CASE("decoder branch matches a dense single-sample oracle") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 1);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Mat tokens = random_mat(rng, 4, 8), memory = random_mat(rng, 3, 5);
    Tape<double> t;
    auto bp = bind(t, p);
    auto out = decoder_branch(t.leaf(tokens), t.leaf(memory), bp,
                              "decoder.target", 4, 3);
    Mat want = branch_oracle(p, "decoder.target", tokens, memory, 8);
    CHECK((out.val() - want).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("batched decoding equals per-sample decoding") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 3);
  std::mt19937_64 rng(4);
  const Eigen::Index B = 5, L = 4, m = 3;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = random_mat(rng, B, 3);
  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  for (Eigen::Index b = 0; b < B; ++b) {
    Mat tok = tokens.middleRows(b * L, L), mem = memory.middleRows(b * m, m);
    Mat y = branch_oracle(p, "decoder.target", tok, mem, 8);
    Mat w = branch_oracle(p, "decoder.interp", tok, mem, 8);
    CHECK(std::abs(out.y_hat.val()(b, 0) - y(0, 0)) <= 1e-12);
    CHECK((out.weights.val().row(b) - w.row(0)).cwiseAbs().maxCoeff() <=
          1e-12);
    const double want_interp = w.row(0).dot(xbar.row(b));
    CHECK(std::abs(out.y_hat_interp.val()(b, 0) - want_interp) <= 1e-12);
  }
}

TEST_CASE("attention rows are a proper softmax") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 5);
  std::mt19937_64 rng(6);
  Mat tokens = random_mat(rng, 4, 8), memory = random_mat(rng, 3, 5);
  // rebuild the implementation's logits and check normalization
  Row mem_mean = memory.colwise().mean();
  Mat q = tokens * p.at("decoder.target.Wq");
  Row gate = (mem_mean * p.at("decoder.target.Wg")).unaryExpr([](double v) {
    return sigm(v);
  });
  Mat k =
      (tokens * p.at("decoder.target.Wk")).array().rowwise() * gate.array();
  Mat logits = q * k.transpose() / std::sqrt(8.0);
  for (Eigen::Index i = 0; i < 4; ++i) {
    Row e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    CHECK(std::abs((e / e.sum()).sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("prediction readout invariant holds bitwise") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 7);
  std::mt19937_64 rng(8);
  const Eigen::Index B = 6, L = 4, m = 3;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = random_mat(rng, B, 3);
  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  auto preds = predictions_from(out, xbar);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Prediction& pr = preds[std::size_t(b)];
    const double again =
        readout_value(pr.weights, xbar.row(b).transpose(), pr.intercept);
    CHECK(pr.y_hat_interp == again);  // bitwise: same expression, same inputs
  }
}

TEST_CASE("zero features zero the readout regardless of the weights") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 9);
  std::mt19937_64 rng(10);
  const Eigen::Index B = 3, L = 4, m = 2;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = Mat::Zero(B, 3);
  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  CHECK(out.y_hat_interp.val().cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.weights.val().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("identical samples decode identically") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 11);
  std::mt19937_64 rng(12);
  const Eigen::Index L = 4, m = 3;
  Mat tok1 = random_mat(rng, L, 8), mem1 = random_mat(rng, m, 5);
  Mat tokens(2 * L, 8), memory(2 * m, 5);
  tokens << tok1, tok1;
  memory << mem1, mem1;
  Mat xbar(2, 3);
  xbar.row(0) = Row::LinSpaced(3, 0.1, 0.3);
  xbar.row(1) = xbar.row(0);
  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  CHECK(out.y_hat.val()(0, 0) == out.y_hat.val()(1, 0));
  CHECK((out.weights.val().row(0) - out.weights.val().row(1))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(out.y_hat_interp.val()(0, 0) == out.y_hat_interp.val()(1, 0));
}

TEST_CASE("the branches are parameter-independent") {
  DecoderConfig cfg = tiny_cfg();
  std::mt19937_64 rng(14);
  const Eigen::Index B = 2, L = 4, m = 3;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = random_mat(rng, B, 3);

  auto run = [&](const Params& p) {
    Tape<double> t(false);
    auto bp = bind(t, p);
    auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
    return std::make_pair(Mat(out.y_hat.val()), Mat(out.weights.val()));
  };

  Params p = tiny_params(cfg, 13);
  auto [y0, w0] = run(p);

  Params p_masked_interp = tiny_params(cfg, 13);
  for (std::size_t i = 0; i < p_masked_interp.size(); ++i)
    if (p_masked_interp.names[i].rfind("decoder.interp.", 0) == 0)
      p_masked_interp.values[i].setZero();
  auto [y1, w1] = run(p_masked_interp);
  CHECK((y1 - y0).cwiseAbs().maxCoeff() == 0.0);  // target head untouched
  CHECK(w1.cwiseAbs().maxCoeff() == 0.0);

  Params p_masked_target = tiny_params(cfg, 13);
  for (std::size_t i = 0; i < p_masked_target.size(); ++i)
    if (p_masked_target.names[i].rfind("decoder.target.", 0) == 0)
      p_masked_target.values[i].setZero();
  auto [y2, w2] = run(p_masked_target);
  CHECK((w2 - w0).cwiseAbs().maxCoeff() == 0.0);  // weights head untouched
  CHECK(y2.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("swapping the condition memory moves the target prediction") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 15);
  std::mt19937_64 rng(16);
  const Eigen::Index L = 4, m = 3;
  Mat tokens = random_mat(rng, L, 8);
  Mat mem_a = random_mat(rng, m, 5), mem_b = random_mat(rng, m, 5);
  Mat xbar = random_mat(rng, 1, 3);
  auto run = [&](const Mat& mem) {
    Tape<double> t(false);
    auto bp = bind(t, p);
    return decode(t.leaf(tokens), t.leaf(mem), xbar, bp, cfg, L, m)
        .y_hat.val()(0, 0);
  };
  CHECK(std::abs(run(mem_a) - run(mem_b)) > 1e-9);
}

TEST_CASE("loss definitions") {
  DecoderConfig cfg = tiny_cfg();
  SUBCASE("perfect predictions give zero everywhere") {
    Mat y(3, 1);
    y << 0.5, -1.0, 2.0;
    Tape<double> t;
    auto l = loss(t.leaf(y), t.leaf(y), y, cfg);
    CHECK(l.dep.val()(0, 0) == 0.0);
    CHECK(l.interp.val()(0, 0) == 0.0);
    CHECK(l.total.val()(0, 0) == 0.0);
  }
  SUBCASE("unit offset on one head only") {
    Mat y(2, 1), yhat(2, 1);
    y << 0.0, 1.0;
    yhat << 1.0, 2.0;
    Tape<double> t;
    auto l = loss(t.leaf(yhat), t.leaf(y), y, cfg);
    CHECK(l.dep.val()(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(l.interp.val()(0, 0) == 0.0);
    CHECK(l.total.val()(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("totals add the two terms") {
    Mat y = Mat::Zero(2, 1), a(2, 1), b(2, 1);
    a << 1.0, 0.0;                    // mean squared error 0.5
    b << std::sqrt(0.6), 0.0;         // mean squared error 0.3
    Tape<double> t;
    auto l = loss(t.leaf(a), t.leaf(b), y, cfg);
    CHECK(l.dep.val()(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(l.interp.val()(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(l.total.val()(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  }
}

TEST_CASE("total-loss gradients are the sum of the branch-loss gradients") {
  DecoderConfig cfg = tiny_cfg();
  Params p = tiny_params(cfg, 17);
  std::mt19937_64 rng(18);
  const Eigen::Index B = 4, L = 4, m = 3;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = random_mat(rng, B, 3), y = random_mat(rng, B, 1);

  auto grads_of = [&](int which) {  // 0: dep, 1: interp, 2: total
    Tape<double> t;
    auto bp = bind(t, p);
    auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
    auto l = loss(out.y_hat, out.y_hat_interp, y, cfg);
    t.backward(which == 0 ? l.dep : which == 1 ? l.interp : l.total);
    return bp.grads();
  };
  auto gd = grads_of(0), gi = grads_of(1), gt = grads_of(2);
  for (std::size_t k = 0; k < p.size(); ++k) {
    INFO("parameter ", p.names[k]);
    CHECK((gt[k] - (gd[k] + gi[k])).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("decoder gradients match finite differences") {
  DecoderConfig cfg = tiny_cfg();
  cfg.ffn_hidden = 4;
  Params p = tiny_params(cfg, 19);
  std::mt19937_64 rng(20);
  const Eigen::Index B = 3, L = 4, m = 2;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = random_mat(rng, B, 3), y = random_mat(rng, B, 1);

  auto loss_value = [&](const Params& ps) {
    Tape<double> t(false);
    auto bp = bind(t, ps);
    auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
    auto l = loss(out.y_hat, out.y_hat_interp, y, cfg);
    return l.total.val()(0, 0);
  };

  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  auto l = loss(out.y_hat, out.y_hat_interp, y, cfg);
  t.backward(l.total);

  const double h = 1e-5;
  for (std::size_t k = 0; k < p.size(); ++k) {
    INFO("parameter ", p.names[k]);
    const Mat g = bp.vars[k].grad_touched()
                      ? Mat(bp.vars[k].grad())
                      : Mat(Mat::Zero(p.values[k].rows(), p.values[k].cols()));
    Mat& slot = p.values[k];
    for (Eigen::Index i = 0; i < slot.rows(); ++i)
      for (Eigen::Index j = 0; j < slot.cols(); ++j) {
        const double keep = slot(i, j);
        slot(i, j) = keep + h;
        const double up = loss_value(p);
        slot(i, j) = keep - h;
        const double dn = loss_value(p);
        slot(i, j) = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double rel = std::abs(g(i, j) - fd) /
                           std::max({std::abs(g(i, j)), std::abs(fd), 1e-6});
        CHECK(rel <= 1e-4);
      }
  }
}

TEST_CASE("optional readout intercept") {
  DecoderConfig cfg = tiny_cfg();
  cfg.intercept = true;
  Params p = tiny_params(cfg, 21);
  CHECK(p.at("decoder.interp.head.W").cols() == cfg.feature_dim + 1);
  std::mt19937_64 rng(22);
  const Eigen::Index B = 2, L = 4, m = 2;
  Mat tokens = random_mat(rng, B * L, 8), memory = random_mat(rng, B * m, 5);
  Mat xbar = Mat::Zero(B, 3);  // zero features isolate the constant
  Tape<double> t;
  auto bp = bind(t, p);
  auto out = decode(t.leaf(tokens), t.leaf(memory), xbar, bp, cfg, L, m);
  CHECK(out.weights.cols() == 3);
  CHECK((out.y_hat_interp.val() - out.intercept.val()).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK(out.intercept.val().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("bad decoder configurations are rejected") {
  DecoderConfig cfg = tiny_cfg();
  cfg.w_dep = -0.5;
  std::mt19937_64 rng(23);
  Params p;
  CHECK_THROWS_AS(add_decoder_params(p, cfg, rng), Error);
  DecoderConfig cfg2 = tiny_cfg();
  cfg2.feature_dim = 0;
  Params p2;
  CHECK_THROWS_AS(add_decoder_params(p2, cfg2, rng), Error);
}
