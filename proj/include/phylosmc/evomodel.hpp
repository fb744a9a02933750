#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

namespace phylosmc {

using Matrix4 = Eigen::Matrix4d;
using Vector4 = Eigen::Vector4d;

enum class ModelKind { jc69, gtr };

inline constexpr int kGtrExchangeabilities = 6;
inline constexpr int kGtrParameters = 10;
// Exchangeability order: AC, AG, AT, CG, CT, GT.
inline constexpr std::array<std::array<int, 2>, kGtrExchangeabilities> kGtrPairs{
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

inline std::string to_string(ModelKind k) { return k == ModelKind::jc69 ? "jc69" : "gtr"; }
inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "jc69" || s == "JC69") return ModelKind::jc69;
  if (s == "gtr" || s == "GTR") return ModelKind::gtr;
  throw std::invalid_argument(fmt::format("unknown model kind '{}'", s));
}

struct TransitionGrads {
  Matrix4 dP_db;
  std::vector<Matrix4> dP_dtheta;  // one per theta component
};

// Reversible nucleotide CTMC normalized to one expected substitution per unit
// branch length. The eigensystem is computed once at construction, so a
// RateModel can be shared freely between threads.
class RateModel {
 public:
  static RateModel jc69() {
    Matrix4 q = Matrix4::Constant(1.0 / 3.0);
    q.diagonal().setConstant(-1.0);
    return RateModel(ModelKind::jc69, {}, q, Vector4::Constant(0.25), {}, Eigen::Matrix<double, 4, Eigen::Dynamic>(4, 0));
  }

  // theta[0..6) are softplus-transformed exchangeabilities, theta[6..10) are
  // softmax logits of the stationary distribution.
  static RateModel gtr(std::span<const double> theta) {
    if (theta.size() != kGtrParameters)
      throw std::invalid_argument(fmt::format("GTR needs {} parameters, got {}", kGtrParameters, theta.size()));
    for (double t : theta)
      if (!std::isfinite(t)) throw std::invalid_argument("GTR parameters must be finite");

    std::array<double, kGtrExchangeabilities> rates{}, drates{};
    for (int e = 0; e < kGtrExchangeabilities; ++e) {
      double t = theta[e];
      rates[e] = t > 30 ? t : std::log1p(std::exp(t));
      drates[e] = 1.0 / (1.0 + std::exp(-t));
    }
    Vector4 logits(theta[6], theta[7], theta[8], theta[9]);
    Vector4 eta = (logits.array() - logits.maxCoeff()).exp();
    eta /= eta.sum();

    Matrix4 r = Matrix4::Zero();
    for (int e = 0; e < kGtrExchangeabilities; ++e) {
      r(kGtrPairs[e][0], kGtrPairs[e][1]) = rates[e];
      r(kGtrPairs[e][1], kGtrPairs[e][0]) = rates[e];
    }
    auto unnormalized = [](const Matrix4& rr, const Vector4& pi) {
      Matrix4 q = Matrix4::Zero();
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j)
          if (i != j) q(i, j) = rr(i, j) * pi(j);
        q(i, i) = -q.row(i).sum();
      }
      return q;
    };
    Matrix4 q_raw = unnormalized(r, eta);
    double mu = -(eta.array() * q_raw.diagonal().array()).sum();
    Matrix4 q = q_raw / mu;

    // dQ = (dQraw - Q dmu) / mu, with dQraw linear in (dr, deta).
    std::vector<Matrix4> dq(kGtrParameters);
    Eigen::Matrix<double, 4, Eigen::Dynamic> deta(4, kGtrParameters);
    deta.setZero();
    for (int k = 0; k < kGtrParameters; ++k) {
      Matrix4 dr = Matrix4::Zero();
      Vector4 dpi = Vector4::Zero();
      if (k < kGtrExchangeabilities) {
        dr(kGtrPairs[k][0], kGtrPairs[k][1]) = drates[k];
        dr(kGtrPairs[k][1], kGtrPairs[k][0]) = drates[k];
      } else {
        int n = k - kGtrExchangeabilities;
        for (int m = 0; m < 4; ++m) dpi(m) = eta(m) * ((m == n ? 1.0 : 0.0) - eta(n));
      }
      deta.col(k) = dpi;
      Matrix4 dq_raw = Matrix4::Zero();
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j)
          if (i != j) dq_raw(i, j) = dr(i, j) * eta(j) + r(i, j) * dpi(j);
        dq_raw(i, i) = -dq_raw.row(i).sum();
      }
      double dmu = -(dpi.array() * q_raw.diagonal().array()).sum() - (eta.array() * dq_raw.diagonal().array()).sum();
      dq[k] = (dq_raw - q * dmu) / mu;
    }
    return RateModel(ModelKind::gtr, std::vector<double>(theta.begin(), theta.end()), q, eta, std::move(dq),
                     std::move(deta));
  }

  ModelKind kind() const { return kind_; }
  const std::vector<double>& theta() const { return theta_; }
  std::size_t parameter_count() const { return theta_.size(); }
  const Matrix4& Q() const { return q_; }
  const Vector4& eta() const { return eta_; }
  const Vector4& eigenvalues() const { return lambda_; }
  // d eta / d theta, 4 x parameter_count().
  const Eigen::Matrix<double, 4, Eigen::Dynamic>& deta_dtheta() const { return deta_; }
  const std::vector<Matrix4>& dQ_dtheta() const { return dq_; }

  Matrix4 transition_probs(double b) const {
    if (!(b >= 0.0) || !std::isfinite(b))
      throw std::invalid_argument(fmt::format("branch length must be finite and >= 0, got {}", b));
    Vector4 e = (lambda_ * b).array().exp();
    Matrix4 p = v_ * e.asDiagonal() * vinv_;
    return p.cwiseMax(0.0).cwiseMin(1.0);
  }

  TransitionGrads transition_grads(double b) const {
    if (!(b >= 0.0) || !std::isfinite(b))
      throw std::invalid_argument(fmt::format("branch length must be finite and >= 0, got {}", b));
    TransitionGrads g;
    Vector4 e = (lambda_ * b).array().exp();
    g.dP_db = v_ * (lambda_.array() * e.array()).matrix().asDiagonal() * vinv_;
    if (dq_.empty()) return g;
    // Divided differences of exp(b x) at the eigenvalues.
    Matrix4 phi;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        double gap = lambda_(i) - lambda_(j);
        phi(i, j) = std::abs(gap) < 1e-10 ? b * e(i) : e(j) * std::expm1(b * gap) / gap;
      }
    }
    g.dP_dtheta.reserve(dq_eig_.size());
    for (const Matrix4& de : dq_eig_) g.dP_dtheta.push_back(v_ * de.cwiseProduct(phi) * vinv_);
    return g;
  }

 private:
  RateModel(ModelKind kind, std::vector<double> theta, const Matrix4& q, const Vector4& eta, std::vector<Matrix4> dq,
            Eigen::Matrix<double, 4, Eigen::Dynamic> deta)
      : kind_(kind), theta_(std::move(theta)), q_(q), eta_(eta), dq_(std::move(dq)), deta_(std::move(deta)) {
    Vector4 sq = eta_.array().sqrt();
    Matrix4 sym = sq.asDiagonal() * q_ * sq.cwiseInverse().asDiagonal();
    sym = 0.5 * (sym + sym.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix4> solver(sym);
    lambda_ = solver.eigenvalues();
    const Matrix4& u = solver.eigenvectors();
    v_ = sq.cwiseInverse().asDiagonal() * u;
    vinv_ = u.transpose() * sq.asDiagonal();
    dq_eig_.reserve(dq_.size());
    for (const Matrix4& d : dq_) dq_eig_.push_back(vinv_ * d * v_);
  }

  ModelKind kind_;
  std::vector<double> theta_;
  Matrix4 q_;
  Vector4 eta_;
  std::vector<Matrix4> dq_;
  Eigen::Matrix<double, 4, Eigen::Dynamic> deta_;
  Vector4 lambda_;
  Matrix4 v_, vinv_;
  std::vector<Matrix4> dq_eig_;
};

inline RateModel build_model(ModelKind kind, std::span<const double> theta = {}) {
  if (kind == ModelKind::jc69) return RateModel::jc69();
  if (theta.empty()) {
    std::vector<double> zeros(kGtrParameters, 0.0);
    return RateModel::gtr(zeros);
  }
  return RateModel::gtr(theta);
}

// params.json: {kind, theta, Q (row-major), eta}, numbers with 17 significant
// digits.
inline std::string to_params_json(const RateModel& m) {
  auto list = [](auto begin, auto end) {
    std::string s = "[";
    for (auto it = begin; it != end; ++it) {
      if (it != begin) s += ", ";
      s += fmt::format("{:.17g}", *it);
    }
    return s + "]";
  };
  std::vector<double> q;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) q.push_back(m.Q()(i, j));
  std::vector<double> eta(m.eta().data(), m.eta().data() + 4);
  return fmt::format("{{\"kind\": \"{}\", \"theta\": {}, \"Q\": {}, \"eta\": {}}}\n", to_string(m.kind()),
                     list(m.theta().begin(), m.theta().end()), list(q.begin(), q.end()), list(eta.begin(), eta.end()));
}

inline RateModel from_params_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
  std::vector<double> theta = j.value("theta", std::vector<double>{});
  if (kind == ModelKind::jc69) return RateModel::jc69();
  return RateModel::gtr(theta);
}

}  // namespace phylosmc
