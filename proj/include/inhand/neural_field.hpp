// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// The implicit scene network: an SDF trunk with color, semantic and
// deformation heads, per-frame embeddings and camera-pose corrections, and
// exact derivatives of everything.
//
// Differentiation scheme: every sample carries three forward tangents
// (d/dp), so the spatial SDF gradient falls out of the forward pass; the
// backward pass propagates adjoints of both values and tangents, which
// yields exact parameter gradients for losses that consume the gradient
// (eikonal, normal-conditioned color) without a second-order tape.

#ifndef INHAND_NEURAL_FIELD_HPP
#define INHAND_NEURAL_FIELD_HPP

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "inhand/geometry.hpp"

namespace inhand {

// ---------------------------------------------------------------------------
// Configuration and parameter layout
// ---------------------------------------------------------------------------

struct FieldConfig {
  int pos_bands = 6;
  int dir_bands = 4;
  int trunk_width = 128;
  int trunk_depth = 4;   // hidden layers
  int skip_layer = 2;    // hidden layer whose input re-concatenates the encoding
  int feature_dim = 64;
  int color_width = 64;
  int color_hidden = 2;
  int semantic_width = 32;
  int deform_width = 64;
  int deform_hidden = 3;
  int embed_dim = 8;
  int num_frames = 0;
  bool use_deformation = false;
  double h_inv_init = 0.3;
  double sphere_init_radius = 0.5;

  int pos_enc_dim() const { return 3 + 6 * pos_bands; }
  int dir_enc_dim() const { return 3 + 6 * dir_bands; }
  int color_in_dim() const { return feature_dim + dir_enc_dim() + 3; }
  int deform_in_dim() const { return pos_enc_dim() + embed_dim; }

};

inline void to_json(nlohmann::json& j, const FieldConfig& c) {
  j = nlohmann::json{{"pos_bands", c.pos_bands},
                     {"dir_bands", c.dir_bands},
                     {"trunk_width", c.trunk_width},
                     {"trunk_depth", c.trunk_depth},
                     {"skip_layer", c.skip_layer},
                     {"feature_dim", c.feature_dim},
                     {"color_width", c.color_width},
                     {"color_hidden", c.color_hidden},
                     {"semantic_width", c.semantic_width},
                     {"deform_width", c.deform_width},
                     {"deform_hidden", c.deform_hidden},
                     {"embed_dim", c.embed_dim},
                     {"num_frames", c.num_frames},
                     {"use_deformation", c.use_deformation},
                     {"h_inv_init", c.h_inv_init},
                     {"sphere_init_radius", c.sphere_init_radius}};
}

inline void from_json(const nlohmann::json& j, FieldConfig& c) {
  FieldConfig d;
  c.pos_bands = j.value("pos_bands", d.pos_bands);
  c.dir_bands = j.value("dir_bands", d.dir_bands);
  c.trunk_width = j.value("trunk_width", d.trunk_width);
  c.trunk_depth = j.value("trunk_depth", d.trunk_depth);
  c.skip_layer = j.value("skip_layer", d.skip_layer);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.color_hidden = j.value("color_hidden", d.color_hidden);
  c.color_width = j.value("color_width", d.color_width);
  c.semantic_width = j.value("semantic_width", d.semantic_width);
  c.deform_width = j.value("deform_width", d.deform_width);
  c.deform_hidden = j.value("deform_hidden", d.deform_hidden);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_frames = j.value("num_frames", d.num_frames);
  c.use_deformation = j.value("use_deformation", d.use_deformation);
  c.h_inv_init = j.value("h_inv_init", d.h_inv_init);
  c.sphere_init_radius = j.value("sphere_init_radius", d.sphere_init_radius);
}

/// One dense layer's slot in the flat parameter vector (column-major W).
struct LayerSlot {
  int w_offset = 0;
  int b_offset = 0;
  int in = 0;
  int out = 0;
};

template <typename S>
struct FieldParams {
  using VecS = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  FieldConfig config;
  VecS values;

  std::vector<LayerSlot> trunk;     // trunk_depth hidden layers
  LayerSlot sdf_row;                // trunk_width -> 1
  LayerSlot feature_head;           // trunk_width -> feature_dim
  std::vector<LayerSlot> color;     // color_hidden + output
  std::vector<LayerSlot> semantic;  // 1 hidden + output
  std::vector<LayerSlot> deform;    // deform_hidden + output (6)
  int embed_offset = 0;
  int pose_offset = 0;      // 6 per frame: axis-angle, translation
  int log_h_inv_offset = 0;
  int total = 0;

  S h_inv() const { return std::exp(values[log_h_inv_offset]); }
  S sharpness() const { return S(1) / h_inv(); }  // h

  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> weight(const LayerSlot& l) {
    return {values.data() + l.w_offset, l.out, l.in};
  }
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> weight(
      const LayerSlot& l) const {
    return {values.data() + l.w_offset, l.out, l.in};
  }
  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> bias(const LayerSlot& l) {
    return {values.data() + l.b_offset, l.out};
  }
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bias(const LayerSlot& l) const {
    return {values.data() + l.b_offset, l.out};
  }

  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> embedding(int frame) {
    return {values.data() + embed_offset + frame * config.embed_dim, config.embed_dim};
  }
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> embedding(int frame) const {
    return {values.data() + embed_offset + frame * config.embed_dim, config.embed_dim};
  }
  Eigen::Map<Eigen::Matrix<S, 6, 1>> pose_correction(int frame) {
    return Eigen::Map<Eigen::Matrix<S, 6, 1>>(values.data() + pose_offset + frame * 6);
  }
  Eigen::Map<const Eigen::Matrix<S, 6, 1>> pose_correction(int frame) const {
    return Eigen::Map<const Eigen::Matrix<S, 6, 1>>(values.data() + pose_offset + frame * 6);
  }
};

namespace field_detail {

template <typename S>
LayerSlot add_layer(FieldParams<S>* p, int in, int out, int* at) {
  LayerSlot l;
  l.in = in;
  l.out = out;
  l.w_offset = *at;
  *at += in * out;
  l.b_offset = *at;
  *at += out;
  return l;
}

}  // namespace field_detail

/// Allocates the flat parameter vector and records the layout. Values are
/// zero; call geometric_init afterwards.
template <typename S>
FieldParams<S> make_field_params(const FieldConfig& config) {
  FieldParams<S> p;
  p.config = config;
  int at = 0;
  int enc = config.pos_enc_dim();
  for (int i = 0; i < config.trunk_depth; ++i) {
    int in = i == 0 ? enc : (i == config.skip_layer ? config.trunk_width + enc
                                                    : config.trunk_width);
    p.trunk.push_back(field_detail::add_layer(&p, in, config.trunk_width, &at));
  }
  p.sdf_row = field_detail::add_layer(&p, config.trunk_width, 1, &at);
  p.feature_head = field_detail::add_layer(&p, config.trunk_width, config.feature_dim, &at);
  for (int i = 0; i < config.color_hidden; ++i)
    p.color.push_back(field_detail::add_layer(
        &p, i == 0 ? config.color_in_dim() : config.color_width, config.color_width, &at));
  p.color.push_back(field_detail::add_layer(&p, config.color_width, 3, &at));
  p.semantic.push_back(field_detail::add_layer(&p, config.feature_dim, config.semantic_width, &at));
  p.semantic.push_back(field_detail::add_layer(&p, config.semantic_width, 3, &at));
  for (int i = 0; i < config.deform_hidden; ++i)
    p.deform.push_back(field_detail::add_layer(
        &p, i == 0 ? config.deform_in_dim() : config.deform_width, config.deform_width, &at));
  p.deform.push_back(field_detail::add_layer(&p, config.deform_width, 6, &at));
  p.embed_offset = at;
  at += config.num_frames * config.embed_dim;
  p.pose_offset = at;
  at += config.num_frames * 6;
  p.log_h_inv_offset = at;
  at += 1;
  p.total = at;
  p.values = FieldParams<S>::VecS::Zero(at);
  return p;
}

/// Initialization: the SDF trunk approximates a sphere of the configured
/// radius (positive outside); encoding columns beyond raw xyz start at zero;
/// the deformation output layer starts at zero (identity warp).
///
/// The trunk construction is deterministic-geometric rather than random: the
/// first layer projects onto a Fibonacci-sphere direction set, the remaining
/// (near-ReLU) hidden layers pass activations through, and the SDF row
/// averages them, so sum_i softplus(u_i . p) * 4 / width ~ |p| with O(1/width)
/// quadrature error instead of the O(1/sqrt(width)) of a random init.
template <typename S>
void geometric_init(FieldParams<S>* p, std::uint64_t seed) {
  Pcg32 rng(seed, 0x51u);
  auto normal_fill = [&](const LayerSlot& l, double std_dev) {
    auto w = p->weight(l);
    for (int c = 0; c < l.in; ++c)
      for (int r = 0; r < l.out; ++r) w(r, c) = static_cast<S>(std_dev * rng.normal());
    p->bias(l).setZero();
  };
  auto jitter = [&](const LayerSlot& l, double std_dev) {
    auto w = p->weight(l);
    for (int c = 0; c < l.in; ++c)
      for (int r = 0; r < l.out; ++r) w(r, c) += static_cast<S>(std_dev * rng.normal());
  };

  const FieldConfig& cfg = p->config;
  const int width = cfg.trunk_width;
  for (int i = 0; i < cfg.trunk_depth; ++i) {
    const LayerSlot& l = p->trunk[i];
    p->weight(l).setZero();
    p->bias(l).setZero();
    if (i == 0) {
      // Fibonacci-sphere direction per unit.
      auto w = p->weight(l);
      const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
      for (int r = 0; r < width; ++r) {
        double z = 1.0 - 2.0 * (r + 0.5) / width;
        double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        double phi = golden_angle * r;
        w(r, 0) = static_cast<S>(rho * std::cos(phi));
        w(r, 1) = static_cast<S>(rho * std::sin(phi));
        w(r, 2) = static_cast<S>(z);
      }
    } else if (i == cfg.skip_layer) {
      // Identity on the hidden part; the concat is pre-scaled by 1/sqrt(2).
      auto w = p->weight(l);
      for (int r = 0; r < width; ++r) w(r, r) = static_cast<S>(std::sqrt(2.0));
    } else {
      auto w = p->weight(l);
      for (int r = 0; r < width; ++r) w(r, r) = S(1);
    }
    jitter(l, 1e-3);
  }
  {
    const LayerSlot& l = p->sdf_row;
    auto w = p->weight(l);
    for (int c = 0; c < l.in; ++c) w(0, c) = static_cast<S>(4.0 / width + 1e-4 * rng.normal());
    p->bias(l)(0) = static_cast<S>(-cfg.sphere_init_radius);
  }
  normal_fill(p->feature_head, std::sqrt(2.0 / p->feature_head.out));
  for (const auto& l : p->color) normal_fill(l, std::sqrt(2.0 / (l.in + l.out)));
  for (const auto& l : p->semantic) normal_fill(l, std::sqrt(2.0 / (l.in + l.out)));
  for (std::size_t i = 0; i + 1 < p->deform.size(); ++i)
    normal_fill(p->deform[i], std::sqrt(2.0 / (p->deform[i].in + p->deform[i].out)));
  // Deformation output stays zero: identity warp at the start of training.
  p->weight(p->deform.back()).setZero();
  p->bias(p->deform.back()).setZero();

  for (int f = 0; f < cfg.num_frames; ++f) {
    auto e = p->embedding(f);
    for (int i = 0; i < cfg.embed_dim; ++i) e(i) = static_cast<S>(0.01 * rng.normal());
  }
  // Pose corrections start at zero (identity).
  p->values[p->log_h_inv_offset] = static_cast<S>(std::log(cfg.h_inv_init));
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header + little-endian f64 blocks in declaration order
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const FieldParams<S>& params, const std::string& path,
                     const nlohmann::json& extra_state = {},
                     const std::vector<const Eigen::Matrix<S, Eigen::Dynamic, 1>*>&
                         extra_blocks = {}) {
  nlohmann::json header;
  header["format"] = "inhand-field-v1";
  header["architecture"] = params.config;
  header["parameter_count"] = params.total;
  header["blocks"] = 1 + static_cast<int>(extra_blocks.size());
  if (!extra_state.is_null() && !extra_state.empty()) header["state"] = extra_state;
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header_str.data(), static_cast<long>(header_str.size()));
  auto write_block = [&](const Eigen::Matrix<S, Eigen::Dynamic, 1>& v) {
    std::vector<double> buf(v.size());
    for (int i = 0; i < v.size(); ++i) buf[i] = static_cast<double>(v[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), 8 * static_cast<long>(buf.size()));
  };
  write_block(params.values);
  for (const auto* b : extra_blocks) write_block(*b);
}

template <typename S>
FieldParams<S> load_checkpoint(const std::string& path, nlohmann::json* state = nullptr,
                               std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>>*
                                   extra_blocks = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || header_len > (1u << 20)) throw std::runtime_error("corrupt checkpoint header");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<long>(header_len));
  nlohmann::json header = nlohmann::json::parse(header_str);
  if (header.at("format") != "inhand-field-v1")
    throw std::runtime_error("unknown checkpoint format");
  FieldConfig cfg = header.at("architecture").get<FieldConfig>();
  FieldParams<S> params = make_field_params<S>(cfg);
  if (header.at("parameter_count").get<int>() != params.total)
    throw std::runtime_error("checkpoint parameter count mismatch");
  auto read_block = [&](Eigen::Matrix<S, Eigen::Dynamic, 1>* v) {
    std::vector<double> buf(v->size());
    in.read(reinterpret_cast<char*>(buf.data()), 8 * static_cast<long>(buf.size()));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    for (int i = 0; i < v->size(); ++i) (*v)[i] = static_cast<S>(buf[i]);
  };
  read_block(&params.values);
  if (state) *state = header.value("state", nlohmann::json::object());
  if (extra_blocks) {
    int blocks = header.value("blocks", 1);
    extra_blocks->clear();
    for (int b = 1; b < blocks; ++b) {
      extra_blocks->emplace_back(params.total);
      read_block(&extra_blocks->back());
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Dual numbers carrying three spatial tangents
// ---------------------------------------------------------------------------

template <typename S>
struct Dual3 {
  S v = S(0);
  S g[3] = {S(0), S(0), S(0)};

  Dual3() = default;
  explicit Dual3(S val) : v(val) {}
  Dual3(S val, S g0, S g1, S g2) : v(val), g{g0, g1, g2} {}
};

template <typename S>
Dual3<S> operator+(const Dual3<S>& a, const Dual3<S>& b) {
  return {a.v + b.v, a.g[0] + b.g[0], a.g[1] + b.g[1], a.g[2] + b.g[2]};
}
template <typename S>
Dual3<S> operator-(const Dual3<S>& a, const Dual3<S>& b) {
  return {a.v - b.v, a.g[0] - b.g[0], a.g[1] - b.g[1], a.g[2] - b.g[2]};
}
template <typename S>
Dual3<S> operator*(const Dual3<S>& a, const Dual3<S>& b) {
  return {a.v * b.v, a.v * b.g[0] + b.v * a.g[0], a.v * b.g[1] + b.v * a.g[1],
          a.v * b.g[2] + b.v * a.g[2]};
}
template <typename S>
Dual3<S> operator*(S c, const Dual3<S>& a) {
  return {c * a.v, c * a.g[0], c * a.g[1], c * a.g[2]};
}

// ---------------------------------------------------------------------------
// Reverse tape over Dual3 values (used for the rigid warp only)
//
// Partials are stored as Dual3 themselves; propagating
//   parent.adj.v    += adj.v * d.v + sum_k adj.g[k] * d.g[k]
//   parent.adj.g[k] += adj.g[k] * d.v
// is the exact chain rule of the tangent-extended system, so second-order
// terms (loss through the spatial gradient) come out right.
// ---------------------------------------------------------------------------

template <typename S>
class DualTape {
 public:
  struct Node {
    Dual3<S> val;
    Dual3<S> da, db;  // partials w.r.t. parents
    int a = -1, b = -1;
  };

  void clear() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }
  const Dual3<S>& value(int i) const { return nodes_[i].val; }

  int input(const Dual3<S>& v) {
    nodes_.push_back({v, {}, {}, -1, -1});
    return size() - 1;
  }
  int constant(S c) { return input(Dual3<S>(c)); }

  int add(int a, int b) {
    return push(nodes_[a].val + nodes_[b].val, Dual3<S>(S(1)), Dual3<S>(S(1)), a, b);
  }
  int sub(int a, int b) {
    return push(nodes_[a].val - nodes_[b].val, Dual3<S>(S(1)), Dual3<S>(S(-1)), a, b);
  }
  int mul(int a, int b) {
    return push(nodes_[a].val * nodes_[b].val, nodes_[b].val, nodes_[a].val, a, b);
  }
  int scale(S c, int a) { return push(c * nodes_[a].val, Dual3<S>(c), {}, a, -1); }
  int sqrt_op(int a) {
    const Dual3<S>& x = nodes_[a].val;
    S sv = std::sqrt(x.v);
    S inv = S(1) / (S(2) * sv);
    Dual3<S> val{sv, inv * x.g[0], inv * x.g[1], inv * x.g[2]};
    // d/dx = 1/(2 sqrt(x)); its tangent is -x.g / (4 x^{3/2}).
    S minus_quarter = S(-1) / (S(4) * sv * x.v);
    Dual3<S> partial{inv, minus_quarter * x.g[0], minus_quarter * x.g[1],
                     minus_quarter * x.g[2]};
    return push(val, partial, {}, a, -1);
  }
  int sin_op(int a) {
    const Dual3<S>& x = nodes_[a].val;
    S s = std::sin(x.v), c = std::cos(x.v);
    Dual3<S> val{s, c * x.g[0], c * x.g[1], c * x.g[2]};
    Dual3<S> partial{c, -s * x.g[0], -s * x.g[1], -s * x.g[2]};
    return push(val, partial, {}, a, -1);
  }
  int cos_op(int a) {
    const Dual3<S>& x = nodes_[a].val;
    S s = std::sin(x.v), c = std::cos(x.v);
    Dual3<S> val{c, -s * x.g[0], -s * x.g[1], -s * x.g[2]};
    Dual3<S> partial{-s, -c * x.g[0], -c * x.g[1], -c * x.g[2]};
    return push(val, partial, {}, a, -1);
  }
  int recip(int a) {
    const Dual3<S>& x = nodes_[a].val;
    S inv = S(1) / x.v;
    S inv2 = inv * inv;
    Dual3<S> val{inv, -inv2 * x.g[0], -inv2 * x.g[1], -inv2 * x.g[2]};
    S two_inv3 = S(2) * inv2 * inv;
    Dual3<S> partial{-inv2, two_inv3 * x.g[0], two_inv3 * x.g[1], two_inv3 * x.g[2]};
    return push(val, partial, {}, a, -1);
  }

  /// Reverse sweep. seed_adjoints holds (node index, adjoint) pairs; result
  /// adjoints for all nodes land in adj().
  void backward(const std::vector<std::pair<int, Dual3<S>>>& seeds) {
    adj_.assign(nodes_.size(), Dual3<S>());
    for (const auto& [i, a] : seeds) accumulate(adj_[i], a, Dual3<S>(S(1)));
    for (int i = size() - 1; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (n.a >= 0) accumulate(adj_[n.a], adj_[i], n.da);
      if (n.b >= 0) accumulate(adj_[n.b], adj_[i], n.db);
    }
  }
  const Dual3<S>& adj(int i) const { return adj_[i]; }

 private:
  int push(const Dual3<S>& val, const Dual3<S>& da, const Dual3<S>& db, int a, int b) {
    nodes_.push_back({val, da, db, a, b});
    return size() - 1;
  }
  static void accumulate(Dual3<S>& target, const Dual3<S>& adj, const Dual3<S>& partial) {
    target.v += adj.v * partial.v + adj.g[0] * partial.g[0] + adj.g[1] * partial.g[1] +
                adj.g[2] * partial.g[2];
    target.g[0] += adj.g[0] * partial.v;
    target.g[1] += adj.g[1] * partial.v;
    target.g[2] += adj.g[2] * partial.v;
  }

  std::vector<Node> nodes_;
  std::vector<Dual3<S>> adj_;
};

/// Rigid warp p' = R(axis_angle) p + translation on the tape. Returns the
/// node ids of inputs and outputs so callers can seed/read adjoints.
template <typename S>
struct WarpNodes {
  int a[3], t[3], p[3];
  int out[3];
};

template <typename S>
WarpNodes<S> build_warp(DualTape<S>* tape, const Dual3<S> a_in[3], const Dual3<S> t_in[3],
                        const Dual3<S> p_in[3]) {
  WarpNodes<S> n{};
  for (int i = 0; i < 3; ++i) {
    n.a[i] = tape->input(a_in[i]);
    n.t[i] = tape->input(t_in[i]);
    n.p[i] = tape->input(p_in[i]);
  }
  // theta^2 = a.a
  int t2 = tape->add(tape->add(tape->mul(n.a[0], n.a[0]), tape->mul(n.a[1], n.a[1])),
                     tape->mul(n.a[2], n.a[2]));
  int A, B;  // sin(theta)/theta and (1-cos(theta))/theta^2
  if (tape->value(t2).v < S(1e-10)) {
    // Series keeps both factors smooth through zero.
    int t4 = tape->mul(t2, t2);
    A = tape->add(tape->add(tape->constant(S(1)), tape->scale(S(-1.0 / 6.0), t2)),
                  tape->scale(S(1.0 / 120.0), t4));
    B = tape->add(tape->add(tape->constant(S(0.5)), tape->scale(S(-1.0 / 24.0), t2)),
                  tape->scale(S(1.0 / 720.0), t4));
  } else {
    int theta = tape->sqrt_op(t2);
    A = tape->mul(tape->sin_op(theta), tape->recip(theta));
    B = tape->mul(tape->sub(tape->constant(S(1)), tape->cos_op(theta)), tape->recip(t2));
  }
  // cross = a x p ; axdot = a . p
  int cx = tape->sub(tape->mul(n.a[1], n.p[2]), tape->mul(n.a[2], n.p[1]));
  int cy = tape->sub(tape->mul(n.a[2], n.p[0]), tape->mul(n.a[0], n.p[2]));
  int cz = tape->sub(tape->mul(n.a[0], n.p[1]), tape->mul(n.a[1], n.p[0]));
  int adot = tape->add(tape->add(tape->mul(n.a[0], n.p[0]), tape->mul(n.a[1], n.p[1])),
                       tape->mul(n.a[2], n.p[2]));
  int cross[3] = {cx, cy, cz};
  for (int i = 0; i < 3; ++i) {
    // p' = p + A (a x p) + B (a (a.p) - theta^2 p) + t
    int term_b = tape->sub(tape->mul(n.a[i], adot), tape->mul(t2, n.p[i]));
    int rotated = tape->add(tape->add(n.p[i], tape->mul(A, cross[i])),
                            tape->mul(B, term_b));
    n.out[i] = tape->add(rotated, n.t[i]);
  }
  return n;
}

}  // namespace inhand

#endif  // INHAND_NEURAL_FIELD_HPP
