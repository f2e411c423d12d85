// Brute-force evaluation of the training objectives from their closed-form
// definitions, on plain nested vectors. Independent of the autodiff path.
#pragma once

#include <cmath>
#include <vector>

namespace motis::testing {

using Rows = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// −(1/N) Σ_i log( exp(q_i·c_i/τ) / Σ_j exp(q_i·c_j/τ) )
inline double brute_contrastive(const Rows& q, const Rows& c, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < c.size(); ++j) denom += std::exp(dot(q[i], c[j]) / tau);
    total += -std::log(std::exp(dot(q[i], c[i]) / tau) / denom);
  }
  return total / static_cast<double>(q.size());
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double s = 0;
  for (double v : z) s += std::exp(v);
  std::vector<double> p;
  for (double v : z) p.push_back(std::exp(v) / s);
  return p;
}

// Σ p log(p/q)
inline double brute_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline Rows transpose(const Rows& m) {
  Rows t(m[0].size(), std::vector<double>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t[j][i] = m[i][j];
  return t;
}

inline double brute_kd(const Rows& student_logits, const Rows& teacher_logits) {
  auto direction = [](const Rows& s, const Rows& t) {
    double acc = 0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += brute_kl(softmax(t[i]), softmax(s[i]));
    return acc / static_cast<double>(s.size());
  };
  return 0.5 * (direction(student_logits, teacher_logits) +
                direction(transpose(student_logits), transpose(teacher_logits)));
}

// negatives[i] holds the k mined rows of query i.
inline double brute_hn(const Rows& q, const Rows& pos, const std::vector<Rows>& negatives, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    double denom = std::exp(dot(q[i], pos[i]) / tau);
    for (const auto& n : negatives[i]) denom += std::exp(dot(q[i], n) / tau);
    total += -std::log(std::exp(dot(q[i], pos[i]) / tau) / denom);
  }
  return total / static_cast<double>(q.size());
}

inline Rows normalized_rows(const std::vector<double>& flat, std::size_t n, std::size_t d) {
  Rows r(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += flat[i * d + j] * flat[i * d + j];
    for (std::size_t j = 0; j < d; ++j) r[i][j] = flat[i * d + j] / std::sqrt(s);
  }
  return r;
}

inline std::vector<double> flatten(const Rows& r) {
  std::vector<double> f;
  for (const auto& row : r) f.insert(f.end(), row.begin(), row.end());
  return f;
}

}  // namespace motis::testing
