#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "epk/decompose/decompose.hpp"
#include "epk/train/train.hpp"

using namespace epk;

namespace {

struct Fixture {
  Dataset ds;
  TrainingPath path;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Rng root(31);
    Rng dr = root.split(1), tr = root.split(2);
    Fixture out{toy_dataset(dr, 10, 5), {}};
    TrainConfig c;
    c.steps = 12;
    c.lr = 3e-3;
    out.path = train(out.ds, ModelSpec{{5, 6, 3}}, c, tr);
    return out;
  }();
  return f;
}

Vector random_vector(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& e : v) e = rng.normal();
  return v;
}

double rel_diff(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

Matrix random_orthogonal(Rng& rng, std::size_t d) {
  Matrix g(d, d);
  for (double& v : g.values()) v = rng.normal();
  return svd(g).U;
}

}  // namespace

TEST(StepSelection, Lists) {
  EXPECT_EQ(StepSelection::final_only().steps(7), (std::vector<std::size_t>{6}));
  EXPECT_EQ(StepSelection::every().steps(3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(StepSelection::every_nth(3).steps(7), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_TRUE(StepSelection::final_only().steps(0).empty());
  EXPECT_THROW(StepSelection::every_nth(0).steps(4), InvalidInput);
}

TEST(GradientBasis, EmptySelectionRejected) {
  const auto& f = fixture();
  Rng rng(1);
  TrainConfig c;
  c.steps = 0;
  const TrainingPath p = train(f.ds, f.path.spec, c, rng);
  EXPECT_THROW(training_grad_basis(p, f.ds), InvalidInput);
}

TEST(GradientBasis, SinglePointSingleStepIsRankOne) {
  const auto& f = fixture();
  const Dataset one = head(f.ds, 1);
  Rng rng(2);
  TrainConfig c;
  c.steps = 1;
  c.lr = 1e-2;
  const TrainingPath p = train(one, f.path.spec, c, rng);
  const GradientBasis b = training_grad_basis(p, one);
  ASSERT_EQ(b.rank(), 1u);
  const Vector g = backprop_param_grad(p.spec, p.checkpoint(0), one.x(0), one.y(0));
  EXPECT_NEAR(std::abs(dot(b.v.row(0), g)) / norm2(g), 1.0, 1e-10);
}

TEST(GradientBasis, RowsOrthonormalAndThresholdMet) {
  const auto& f = fixture();
  for (double thr : {0.5, 0.9, 0.99, 1.0})
    for (auto sel : {StepSelection::final_only(), StepSelection::every()}) {
      const GradientBasis b = training_grad_basis(f.path, f.ds, sel, thr);
      const Matrix gram = matmul_nt(b.v, b.v);
      for (std::size_t i = 0; i < gram.rows(); ++i)
        for (std::size_t j = 0; j < gram.cols(); ++j) EXPECT_NEAR(gram(i, j), i == j ? 1.0 : 0.0, 1e-8);
      const Vector cdf = explained_variance_cdf(b.singular_values);
      EXPECT_GE(cdf[b.rank() - 1], thr - 1e-12);
    }
}

TEST(GradientBasis, PerClassSpanContainsClassSum) {
  const auto& f = fixture();
  const GradientBasis full = training_grad_basis(f.path, f.ds, StepSelection::final_only(), 1.0, ClassReduction::full);
  const Matrix rows = training_gradient_rows(f.path, f.ds, f.path.steps() - 1);
  for (std::size_t r = 0; r < rows.rows(); ++r) EXPECT_LE(ood_score(full, rows.row(r)).score, 1e-7);
}

TEST(OodScore, SpanAndOrthogonalOracles) {
  const auto& f = fixture();
  const GradientBasis b = training_grad_basis(f.path, f.ds, StepSelection::final_only(), 0.99);
  Rng rng(3);
  const Vector c = random_vector(rng, b.rank());
  const Vector inside = matvec_t(b.v, c);
  const OodScore s_in = ood_score(b, inside);
  EXPECT_TRUE(s_in.defined);
  EXPECT_LE(s_in.score, 1e-10);
  Vector out = random_vector(rng, b.v.cols());
  out = sub(out, matvec_t(b.v, matvec(b.v, out)));
  EXPECT_NEAR(ood_score(b, out).score, 1.0, 1e-10);
  const OodScore z = ood_score(b, Vector(b.v.cols(), 0.0));
  EXPECT_FALSE(z.defined);
  EXPECT_TRUE(std::isnan(z.score));
  EXPECT_THROW(ood_score(b, Vector(3, 1.0)), InvalidInput);
}

TEST(OodScore, BoundedAndMonotoneUnderEnlargement) {
  const auto& f = fixture();
  const GradientBasis big = training_grad_basis(f.path, f.ds, StepSelection::every(), 1.0);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector g = random_vector(rng, big.v.cols());
    double prev = 1.0;
    for (std::size_t r = 1; r <= big.rank(); ++r) {
      GradientBasis pre = big;
      pre.v = Matrix(r, big.v.cols());
      for (std::size_t i = 0; i < r; ++i) std::copy(big.v.row(i).begin(), big.v.row(i).end(), pre.v.row(i).begin());
      const double s = ood_score(pre, g).score;
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, prev + 1e-12);
      prev = s;
    }
  }
}

TEST(OodScore, SpanningTheorem) {
  // A test-gradient perturbation orthogonal to every training gradient leaves every step's
  // learned adjustment ⟨g, u_s⟩ unchanged.
  const auto& f = fixture();
  const GradientBasis b = training_grad_basis(f.path, f.ds, StepSelection::every(), 1.0);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector g = random_vector(rng, b.v.cols());
    Vector perp = scaled(random_vector(rng, b.v.cols()), 10.0);
    perp = sub(perp, matvec_t(b.v, matvec(b.v, perp)));
    const Vector g2 = add(g, perp);
    for (std::size_t s = 0; s < f.path.steps(); ++s) {
      const Matrix rows = training_gradient_rows(f.path, f.ds, s);
      Vector u(rows.cols(), 0.0);
      for (std::size_t r = 0; r < rows.rows(); ++r) axpy(1.0, rows.row(r), u);
      EXPECT_NEAR(dot(g2, u), dot(g, u), 1e-10 * std::max(1.0, norm2(g2) * norm2(u)));
    }
  }
}

TEST(OodScore, GradientUsesOwnPrediction) {
  const auto& f = fixture();
  const auto& th = f.path.final_theta;
  const Vector x = Vector(f.ds.x(3).begin(), f.ds.x(3).end());
  const std::size_t pred = predict(f.path.spec, th, x);
  Vector y(3, 0.0);
  y[pred] = 1.0;
  EXPECT_EQ(ood_gradient(f.path.spec, th, x), backprop_param_grad(f.path.spec, th, x, y));
}

TEST(Auroc, KnownValues) {
  EXPECT_EQ(auroc(std::vector<double>{0, 1, 2}, std::vector<double>{3, 4}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{3, 4}, std::vector<double>{0, 1, 2}), 0.0);
  EXPECT_EQ(auroc(std::vector<double>{1, 1}, std::vector<double>{1, 1}), 0.5);
  // pairs (neg, pos): 0<1 win, 0<3 win, 2>1 loss, 2<3 win, 1=1 half, 1<3 win
  EXPECT_NEAR(auroc(std::vector<double>{0, 2, 1}, std::vector<double>{1, 3}), 4.5 / 6.0, 1e-15);
  EXPECT_THROW(auroc(std::vector<double>{}, std::vector<double>{1}), InvalidInput);
}

TEST(InputGrad, ZeroStepPathIsZero) {
  const auto& f = fixture();
  Rng rng(6);
  TrainConfig c;
  c.steps = 0;
  const TrainingPath p = train(f.ds, f.path.spec, c, rng);
  const InputGradients g = input_grad_matrix(p, f.ds, f.ds.x(0));
  ASSERT_EQ(g.blocks.size(), 1u);
  EXPECT_EQ(g.blocks[0].rows(), f.ds.size());
  for (double v : g.blocks[0].values()) EXPECT_EQ(v, 0.0);
}

TEST(InputGrad, ClassSumIsSumOfClasses) {
  const auto& f = fixture();
  const Vector xt{2.0, 3.0, 0.5, -0.2, 0.1};
  const InputGradients full = input_grad_matrix(f.path, f.ds, xt, ClassReduction::full);
  const InputGradients sum = input_grad_matrix(f.path, f.ds, xt);
  ASSERT_EQ(full.blocks.size(), 3u);
  Matrix acc(f.ds.size(), f.ds.dim());
  for (const Matrix& b : full.blocks) axpy(1.0, b.values(), acc.values());
  EXPECT_LE(rel_diff(sum.blocks[0].values(), acc.values()), 1e-12);
}

TEST(InputGrad, MatchesFiniteDifferenceOfContribution) {
  // row j, class c is the x_j-gradient of Σ_s ḡ_{s,c}·J(x_j; θ_s)ᵀa_{j,s} with ḡ and a fixed
  const auto& f = fixture();
  const Vector xt{3.0, 2.0, -0.4, 0.3, 0.0};
  const EpkConfig cfg;
  const InputGradients g = input_grad_matrix(f.path, f.ds, xt, ClassReduction::full, cfg);
  std::vector<Matrix> gbar;
  std::vector<Matrix> weights;
  for (std::size_t s = 0; s < f.path.steps(); ++s) {
    gbar.push_back(integrated_jacobian(f.path.spec, f.path.checkpoint(s), f.path.checkpoint(s + 1), xt, cfg));
    weights.push_back(detail::step_weights(f.path, materialize_batch(f.path, f.ds, s), f.path.checkpoint(s), f.path.step_sizes[s]));
  }
  for (std::size_t j : {0u, 7u, 15u, 29u})
    for (std::size_t c = 0; c < 3; ++c) {
      auto contribution = [&](const Vector& xj) {
        double acc = 0.0;
        for (std::size_t s = 0; s < f.path.steps(); ++s)
          acc += dot(gbar[s].row(c), param_vjp(f.path.spec, f.path.checkpoint(s), xj, weights[s].row(j)));
        return acc;
      };
      Vector fd(f.ds.dim());
      for (std::size_t m = 0; m < fd.size(); ++m) {
        Vector xp(f.ds.x(j).begin(), f.ds.x(j).end()), xm = xp;
        xp[m] += 1e-6;
        xm[m] -= 1e-6;
        fd[m] = (contribution(xp) - contribution(xm)) / 2e-6;
      }
      EXPECT_LE(rel_diff(g.blocks[c].row(j), fd), 1e-6) << "j=" << j << " c=" << c;
    }
}

TEST(InputGrad, RetrainingOracle) {
  // 2 steps on 5 points: perturb one training input, retrain from the same init and compare the
  // change of the trained prediction with G. G holds θ_s and ḡ fixed, so the retrained derivative
  // differs by the effect of x_j on later steps, which is first order in ε.
  Rng dr(7);
  Matrix x(5, 3);
  for (double& v : x.values()) v = dr.normal();
  const Dataset ds = make_dataset(x, {0, 1, 2, 0, 1}, 3, "micro");
  const ModelSpec spec{{3, 8, 3}};
  const Vector xt{0.3, -0.2, 0.5};
  auto worst_error = [&](double lr) {
    TrainConfig c;
    c.steps = 2;
    c.lr = lr;
    c.final_layer_zero = false;
    auto trained_logits = [&](const Dataset& d) {
      Rng tr(8);
      const TrainingPath p = train(d, spec, c, tr);
      return forward(spec, p.final_theta, xt);
    };
    Rng tr(8);
    const TrainingPath p = train(ds, spec, c, tr);
    const InputGradients g = input_grad_matrix(p, ds, xt, ClassReduction::full);
    const double h = 1e-4 * lr;
    double worst = 0.0;
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 3; ++k) {
        Vector fd(3), an(3);
        for (std::size_t m = 0; m < 3; ++m) {
          Dataset dp = ds, dm = ds;
          dp.inputs(j, m) += h;
          dm.inputs(j, m) -= h;
          fd[m] = (trained_logits(dp)[k] - trained_logits(dm)[k]) / (2 * h);
          an[m] = g.blocks[k](j, m);
        }
        worst = std::max(worst, rel_diff(an, fd));
      }
    return worst;
  };
  const double e3 = worst_error(1e-3), e2 = worst_error(1e-2);
  EXPECT_LE(e3, 0.05);
  // the gap is the neglected O(ε) term: ten times the step gives about ten times the gap
  EXPECT_GT(e2 / e3, 5.0);
  EXPECT_LT(e2 / e3, 20.0);
}

TEST(InputGrad, RotationEquivariance) {
  // rotating inputs and the first-layer weights together maps G to G·Qᵀ
  const auto& f = fixture();
  Rng rng(9);
  const Matrix q = random_orthogonal(rng, 5);
  Dataset rd = f.ds;
  for (std::size_t i = 0; i < rd.size(); ++i) {
    const Vector r = matvec(q, f.ds.x(i));
    std::copy(r.begin(), r.end(), rd.inputs.row(i).begin());
  }
  TrainingPath rp = f.path;
  const std::size_t hidden = rp.spec.layer_sizes[1];
  for (Vector& th : rp.checkpoints)
    for (std::size_t h = 0; h < hidden; ++h) {
      std::span<double> row(th.data() + rp.spec.weight_offset(0) + h * 5, 5);
      const Vector rotated = matvec(q, row);  // (W Qᵀ) row = Q · row
      std::copy(rotated.begin(), rotated.end(), row.begin());
    }
  const Vector xt{2.5, 2.5, 0.3, 0.0, -0.1};
  const Matrix g = input_grad_matrix(f.path, f.ds, xt).blocks[0];
  const Matrix gr = input_grad_matrix(rp, rd, matvec(q, xt)).blocks[0];
  const Matrix expect = matmul_nt(g, q);
  EXPECT_LE(rel_diff(gr.values(), expect.values()), 1e-10);
  const SignalSpectrum a = signal_dimension(g), b = signal_dimension(gr);
  EXPECT_EQ(a.n95, b.n95);
  for (std::size_t i = 0; i < a.singular_values.size(); ++i)
    EXPECT_NEAR(a.singular_values[i], b.singular_values[i], 1e-10 * a.singular_values[0]);
}

TEST(InputGrad, RejectsNonCceAndMag) {
  const auto& f = fixture();
  Rng rng(10);
  TrainConfig c;
  c.steps = 2;
  c.lr = 1e-3;
  c.loss = LossKind::mse;
  const TrainingPath mse = train(f.ds, f.path.spec, c, rng);
  EXPECT_THROW(input_grad_matrix(mse, f.ds, f.ds.x(0)), InvalidInput);
  TrainConfig m;
  m.steps = 2;
  m.lr = 1e-3;
  m.mag_alpha = 0.1;
  Matrix w(1, 5);
  w(0, 0) = 1.0;
  const TrainingPath mag = train_mag(f.ds, w, f.path.spec, m, rng);
  EXPECT_THROW(input_grad_matrix(mag, f.ds, f.ds.x(0)), InvalidPath);
}

TEST(SignalDimension, RankOneAndZero) {
  Matrix g(6, 4);
  const Vector u{1, -2, 0.5, 3, 0, 1}, v{0.2, 0.4, -1, 2};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) g(i, j) = u[i] * v[j];
  const SignalSpectrum s = signal_dimension(g);
  EXPECT_EQ(s.n95, 1u);
  EXPECT_NEAR(s.cdf[0], 1.0, 1e-12);
  EXPECT_THROW(signal_dimension(Matrix(3, 3)), InvalidInput);
}

TEST(SignalDimension, CdfProperties) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 5 + trial, d = 3 + trial % 4, r = 1 + trial % 3;
    Matrix a(n, r), b(r, d);
    for (double& v : a.values()) v = rng.normal();
    for (double& v : b.values()) v = rng.normal();
    const SignalSpectrum s = signal_dimension(matmul(a, b));
    for (std::size_t i = 1; i < s.cdf.size(); ++i) EXPECT_GE(s.cdf[i], s.cdf[i - 1]);
    EXPECT_EQ(s.cdf.back(), 1.0);
    EXPECT_LE(s.n95, std::min(r, d));
    EXPECT_GE(s.cdf[s.n95 - 1], 0.95);
    if (s.n95 > 1) {
      EXPECT_LT(s.cdf[s.n95 - 2], 0.95);
    }
    EXPECT_EQ(s.components.rows(), s.n95);
  }
}

TEST(Alignment, IdenticalModelsOverlapFully) {
  Rng rng(12);
  Matrix g(40, 12);
  for (double& v : g.values()) v = rng.normal();
  const Alignment a = cross_model_alignment(g, g, 5, 5);
  for (double o : a.overlap) EXPECT_NEAR(o, 1.0, 1e-10);
  for (double c : a.cosines) EXPECT_NEAR(c, 1.0, 1e-10);
  EXPECT_NEAR(a.chance, 5.0 / 12.0, 1e-15);
}

TEST(Alignment, RandomSubspacesSitAtChance) {
  Rng rng(13);
  const std::size_t d = 784;
  double total = 0.0;
  const int reps = 8;
  for (int r = 0; r < reps; ++r) {
    Matrix a(30, d), b(30, d);
    for (double& v : a.values()) v = rng.normal();
    for (double& v : b.values()) v = rng.normal();
    const Alignment al = cross_model_alignment(a, b, 10, 3);
    total += al.mean_overlap;
    EXPECT_NEAR(al.chance, 10.0 / 784.0, 1e-15);
  }
  // E‖P v‖² = r/d for a uniformly random unit vector
  EXPECT_NEAR(total / reps, 10.0 / 784.0, 0.01);
}

TEST(Alignment, SeedDifferentToyModelsBeatChance) {
  Rng root(14);
  Rng dr = root.split(1);
  const Dataset ds = toy_dataset(dr, 30, 50);
  Vector xt(50, 0.0);
  xt[0] = 2.0, xt[1] = 2.0;
  TrainConfig c;
  c.steps = 30;
  c.lr = 2e-3;
  std::vector<Matrix> gs;
  for (std::uint64_t seed : {100u, 200u}) {
    Rng tr(seed);
    const TrainingPath p = train(ds, ModelSpec{{50, 10, 3}}, c, tr);
    gs.push_back(input_grad_matrix(p, ds, xt).blocks[0]);
  }
  const Alignment a = cross_model_alignment(gs[0], gs[1], 3, 3);
  EXPECT_GT(a.mean_overlap, a.chance);
  EXPECT_LT(a.mean_overlap, 1.0);
}

TEST(DecomposeCsv, Headers) {
  const auto dir = std::filesystem::temp_directory_path();
  Matrix g(3, 2);
  g(0, 0) = 1, g(1, 1) = 2;
  write_spectrum_csv((dir / "epk_spec.csv").string(), signal_dimension(g));
  OodScore s;
  s.score = 0.5;
  s.defined = true;
  write_ood_csv((dir / "epk_ood.csv").string(), {s, OodScore{}}, {1, -1});
  std::ifstream a(dir / "epk_spec.csv"), b(dir / "epk_ood.csv");
  std::string l;
  std::getline(a, l);
  EXPECT_EQ(l, "component,sigma,cdf");
  std::getline(b, l);
  EXPECT_EQ(l, "point_id,score,is_ood");
  std::getline(b, l);
  EXPECT_EQ(l, "0,0.5,1");
  std::getline(b, l);
  EXPECT_EQ(l, "1,nan,");
  std::filesystem::remove(dir / "epk_spec.csv");
  std::filesystem::remove(dir / "epk_ood.csv");
}
