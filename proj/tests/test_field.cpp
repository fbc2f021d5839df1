// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch.hpp>

#include "inhand/field_eval.hpp"
#include "oracles.hpp"

using namespace inhand;

namespace {

FieldConfig tiny_config(bool deformation) {
  FieldConfig cfg;
  cfg.pos_bands = 2;
  cfg.dir_bands = 1;
  cfg.trunk_width = 8;
  cfg.trunk_depth = 3;
  cfg.skip_layer = 1;
  cfg.feature_dim = 6;
  cfg.color_width = 8;
  cfg.color_hidden = 1;
  cfg.semantic_width = 4;
  cfg.deform_width = 6;
  cfg.deform_hidden = 2;
  cfg.embed_dim = 3;
  cfg.num_frames = 2;
  cfg.use_deformation = deformation;
  return cfg;
}

/// Scalar probe loss mixing every output, including a nonlinear use of the
/// spatial gradient so second-order chains are exercised:
///   L = sum_i a_i s_i + (|n_i| - 1)^2 + u_i . c_i + w_i . l_i
double probe_loss(const FieldForward<double>& fwd, const VecX& a, const MatX& u,
                  const MatX& w) {
  double loss = 0.0;
  for (int i = 0; i < fwd.n; ++i) {
    loss += a[i] * fwd.s[i];
    double nn = fwd.grad_s.col(i).norm();
    loss += (nn - 1.0) * (nn - 1.0);
    loss += u.col(i).dot(fwd.color_out.col(i));
    loss += w.col(i).dot(fwd.logits.col(i));
  }
  return loss;
}

FieldAdjoints<double> probe_adjoints(const FieldForward<double>& fwd, const VecX& a,
                                     const MatX& u, const MatX& w) {
  FieldAdjoints<double> adj;
  adj.s_bar = a;
  adj.n_bar.resize(3, fwd.n);
  for (int i = 0; i < fwd.n; ++i) {
    double nn = fwd.grad_s.col(i).norm();
    adj.n_bar.col(i) = 2.0 * (nn - 1.0) / std::max(nn, 1e-12) * fwd.grad_s.col(i);
  }
  adj.c_bar = u;
  adj.l_bar = w;
  return adj;
}

}  // namespace

TEST_CASE("geometric init approximates a sphere", "[field]") {
  FieldConfig cfg;  // full-size architecture
  cfg.num_frames = 4;
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 7);

  Pcg32 rng(99);
  int checked = 0;
  double eik_sum = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (p.norm() > 1.0) continue;
    FieldOutput out = evaluate_field(params, 0.5, p, Vec3::UnitZ(), 0);
    CHECK(std::abs(out.sdf - (p.norm() - 0.5)) < 0.05);
    eik_sum += std::abs(out.grad_sdf.norm() - 1.0);
    ++checked;
  }
  REQUIRE(checked > 50);
  CHECK(eik_sum / checked < 0.1);
}

TEST_CASE("semantic logits have arity 3", "[field]") {
  FieldConfig cfg = tiny_config(false);
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 3);
  FieldOutput out = evaluate_field(params, 0.3, Vec3(0.2, -0.1, 0.4), Vec3::UnitX(), 1);
  CHECK(out.logits.size() == 3);
  CHECK(out.logits.allFinite());
}

TEST_CASE("deformation identity and translation cases", "[field]") {
  FieldConfig cfg = tiny_config(true);
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 11);

  MatS<double> pos(3, 2);
  pos << 0.3, -0.2, 0.1, 0.5, -0.4, 0.2;
  std::vector<int> frames = {0, 1};

  SECTION("zero deformation output leaves points unchanged") {
    // geometric_init zeroes the final deform layer already.
    FieldForward<double> fwd;
    MatS<double> disp;
    deform_probe_forward(params, 0.5, pos, frames, &fwd, &disp);
    CHECK(disp.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("constant translation output shifts points") {
    Vec3 t(0.01, -0.02, 0.03);
    auto bias = params.bias(params.deform.back());
    bias.tail(3) = t;
    FieldForward<double> fwd;
    MatS<double> disp;
    deform_probe_forward(params, 0.5, pos, frames, &fwd, &disp);
    for (int i = 0; i < 2; ++i) CHECK((disp.col(i) - t).norm() < 1e-15);
  }

  SECTION("random weights match the AngleAxis oracle") {
    Pcg32 rng(5);
    for (int i = 0; i < params.deform.back().out * params.deform.back().in; ++i)
      params.values[params.deform.back().w_offset + i] = 0.05 * rng.normal();
    auto bias = params.bias(params.deform.back());
    for (int i = 0; i < 6; ++i) bias[i] = 0.1 * rng.normal();

    FieldForward<double> fwd;
    MatS<double> disp;
    deform_probe_forward(params, 0.5, pos, frames, &fwd, &disp);
    for (int i = 0; i < 2; ++i) {
      Vec3 a = fwd.six.col(i).head<3>();
      Vec3 t = fwd.six.col(i).tail<3>();
      Vec3 expected = oracles::rotate_angle_axis(a, pos.col(i)) + t - pos.col(i);
      CHECK((disp.col(i) - expected).norm() < 1e-9);
    }
  }
}

TEST_CASE("spatial gradient matches finite differences", "[field]") {
  for (bool deform : {false, true}) {
    FieldConfig cfg = tiny_config(deform);
    FieldParams<double> params = make_field_params<double>(cfg);
    geometric_init(&params, 21);
    if (deform) {
      // Non-trivial warp so the gradient actually chains through it.
      Pcg32 rng(31);
      for (int i = 0; i < params.deform.back().out * params.deform.back().in; ++i)
        params.values[params.deform.back().w_offset + i] = 0.05 * rng.normal();
    }

    Pcg32 rng(17);
    const double h = 1e-4;
    for (int trial = 0; trial < 20; ++trial) {
      Vec3 p(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8));
      Vec3 d = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
      FieldOutput out = evaluate_field(params, 0.7, p, d, trial % 2);
      for (int k = 0; k < 3; ++k) {
        Vec3 pp = p, pm = p;
        pp[k] += h;
        pm[k] -= h;
        double fd = (evaluate_field(params, 0.7, pp, d, trial % 2).sdf -
                     evaluate_field(params, 0.7, pm, d, trial % 2).sdf) /
                    (2 * h);
        double scale = std::max({1.0, std::abs(fd), std::abs(out.grad_sdf[k])});
        CHECK(std::abs(out.grad_sdf[k] - fd) / scale < 1e-3);
      }
    }
  }
}

TEST_CASE("parameter gradients match finite differences exhaustively", "[field]") {
  for (bool deform : {false, true}) {
    FieldConfig cfg = tiny_config(deform);
    FieldParams<double> params = make_field_params<double>(cfg);
    geometric_init(&params, 13);
    // Perturb everything (including the zero deform output layer) so no
    // gradient path is accidentally stationary.
    Pcg32 noise(77);
    for (int i = 0; i < params.total; ++i) params.values[i] += 0.03 * noise.normal();

    const int n = 3;
    MatS<double> pos(3, n), dirs(3, n);
    Pcg32 rng(5);
    for (int i = 0; i < n; ++i) {
      pos.col(i) = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
      dirs.col(i) = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    }
    std::vector<int> frames = {0, 1, 0};

    VecX a(n);
    MatX u(3, n), w(3, n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform(-1, 1);
      u.col(i) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      w.col(i) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    }

    FieldForward<double> fwd;
    field_forward(params, 0.6, pos, dirs, frames, &fwd);
    FieldGrads<double> grads(params);
    FieldAdjoints<double> adj = probe_adjoints(fwd, a, u, w);
    field_backward(params, fwd, adj, &grads, nullptr, nullptr);

    const double h = 1e-6;
    int worst_idx = -1;
    double worst = 0.0;
    for (int k = 0; k < params.total; ++k) {
      double orig = params.values[k];
      params.values[k] = orig + h;
      FieldForward<double> fp;
      field_forward(params, 0.6, pos, dirs, frames, &fp);
      double lp = probe_loss(fp, a, u, w);
      params.values[k] = orig - h;
      FieldForward<double> fm;
      field_forward(params, 0.6, pos, dirs, frames, &fm);
      double lm = probe_loss(fm, a, u, w);
      params.values[k] = orig;
      double fd = (lp - lm) / (2 * h);
      double scale = std::max({1.0, std::abs(fd), std::abs(grads.values[k])});
      double rel = std::abs(grads.values[k] - fd) / scale;
      if (rel > worst) {
        worst = rel;
        worst_idx = k;
      }
    }
    INFO("deform=" << deform << " worst index " << worst_idx);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("zero adjoints give zero gradients; accumulation is additive", "[field]") {
  FieldConfig cfg = tiny_config(true);
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 3);

  const int n = 2;
  MatS<double> pos(3, n), dirs(3, n);
  pos << 0.1, 0.2, -0.3, 0.1, 0.2, -0.4;
  dirs << 1, 0, 0, 1, 0, 0;
  for (int i = 0; i < n; ++i) dirs.col(i).normalize();
  std::vector<int> frames = {0, 1};

  FieldForward<double> fwd;
  field_forward(params, 0.5, pos, dirs, frames, &fwd);

  FieldAdjoints<double> zero;
  zero.s_bar = VecX::Zero(n);
  zero.n_bar = MatX::Zero(3, n);
  zero.c_bar = MatX::Zero(3, n);
  zero.l_bar = MatX::Zero(3, n);
  FieldGrads<double> g0(params);
  field_backward(params, fwd, zero, &g0, nullptr, nullptr);
  CHECK(g0.values.cwiseAbs().maxCoeff() == 0.0);

  // Batch gradient equals the sum of per-sample gradients.
  FieldAdjoints<double> adj = zero;
  adj.s_bar << 0.7, -0.3;
  adj.c_bar.col(0) << 0.2, -0.1, 0.5;
  adj.l_bar.col(1) << -0.4, 0.2, 0.1;
  FieldGrads<double> batch(params);
  field_backward(params, fwd, adj, &batch, nullptr, nullptr);

  FieldGrads<double> sum(params);
  for (int i = 0; i < n; ++i) {
    MatS<double> pos1 = pos.col(i), dirs1 = dirs.col(i);
    FieldForward<double> f1;
    field_forward(params, 0.5, pos1, dirs1, {frames[i]}, &f1);
    FieldAdjoints<double> a1;
    a1.s_bar = adj.s_bar.segment(i, 1);
    a1.n_bar = adj.n_bar.col(i);
    a1.c_bar = adj.c_bar.col(i);
    a1.l_bar = adj.l_bar.col(i);
    field_backward(params, f1, a1, &sum, nullptr, nullptr);
  }
  CHECK((batch.values - sum.values).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("evaluation is deterministic", "[field]") {
  FieldConfig cfg = tiny_config(true);
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 3);
  Vec3 p(0.11, -0.27, 0.32), d = Vec3(0.3, 0.4, -0.5).normalized();
  FieldOutput a = evaluate_field(params, 0.4, p, d, 1);
  FieldOutput b = evaluate_field(params, 0.4, p, d, 1);
  CHECK(a.sdf == b.sdf);
  CHECK(a.color == b.color);
  CHECK(a.grad_sdf == b.grad_sdf);
  CHECK(a.logits == b.logits);
}

TEST_CASE("sdf-only path agrees with the full forward", "[field]") {
  for (bool deform : {false, true}) {
    FieldConfig cfg = tiny_config(deform);
    FieldParams<double> params = make_field_params<double>(cfg);
    geometric_init(&params, 23);
    if (deform) {
      Pcg32 rng(3);
      for (int i = 0; i < params.deform.back().out * params.deform.back().in; ++i)
        params.values[params.deform.back().w_offset + i] = 0.03 * rng.normal();
    }
    const int n = 5;
    MatS<double> pos(3, n), dirs(3, n);
    Pcg32 rng(8);
    for (int i = 0; i < n; ++i) {
      pos.col(i) = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
      dirs.col(i) = Vec3::UnitZ();
    }
    std::vector<int> frames = {0, 1, 0, 1, 0};
    FieldForward<double> fwd;
    field_forward(params, 0.8, pos, dirs, frames, &fwd);
    VecS<double> s;
    field_sdf(params, 0.8, pos, frames, deform, &s);
    CHECK((s - fwd.s).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("checkpoint round trip", "[field]") {
  FieldConfig cfg = tiny_config(true);
  FieldParams<double> params = make_field_params<double>(cfg);
  geometric_init(&params, 41);
  VecS<double> extra = VecS<double>::LinSpaced(params.total, 0.0, 1.0);
  nlohmann::json state{{"step", 123}, {"rng_state", "abc"}};
  save_checkpoint(params, "/tmp/inhand_field_ckpt.bin", state, {&extra});

  nlohmann::json state_back;
  std::vector<VecS<double>> blocks;
  FieldParams<double> back =
      load_checkpoint<double>("/tmp/inhand_field_ckpt.bin", &state_back, &blocks);
  CHECK(back.total == params.total);
  CHECK((back.values - params.values).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(blocks.size() == 1);
  CHECK((blocks[0] - extra).cwiseAbs().maxCoeff() == 0.0);
  CHECK(state_back.at("step").get<int>() == 123);
}
