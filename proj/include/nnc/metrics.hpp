#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace nnc {

/// Rows are true classes, columns predicted classes; both 0-based.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  std::uint64_t row_total(std::size_t r) const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < classes; ++c) t += at(r, c);
    return t;
  }
  std::uint64_t col_total(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t r = 0; r < classes; ++r) t += at(r, c);
    return t;
  }

  std::string to_csv() const {
    std::ostringstream o;
    o << "truth\\pred";
    for (std::size_t c = 0; c < classes; ++c) o << ',' << c + 1;
    o << '\n';
    for (std::size_t r = 0; r < classes; ++r) {
      o << r + 1;
      for (std::size_t c = 0; c < classes; ++c) o << ',' << at(r, c);
      o << '\n';
    }
    return o.str();
  }
};

struct Scores {
  double oa = 0, aa = 0, kappa = 0;
  std::vector<double> per_class;  // NaN for classes absent from the evaluated pixels
  ConfusionMatrix confusion;

  nlohmann::json to_json() const {
    nlohmann::json pc = nlohmann::json::array();
    for (double a : per_class) pc.push_back(std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a));
    return {{"oa", oa}, {"aa", aa}, {"kappa", kappa}, {"per_class", pc}};
  }
};

inline Scores scores_from(const ConfusionMatrix& m) {
  const std::uint64_t total = m.total();
  if (total == 0) throw std::invalid_argument("evaluate: no pixels to score");
  Scores s;
  s.confusion = m;
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < m.classes; ++c) trace += m.at(c, c);
  // Sum of row_total * col_total stays integral until the final division.
  std::uint64_t chance = 0;
  double acc_sum = 0;
  std::size_t present = 0;
  s.per_class.assign(m.classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < m.classes; ++c) {
    const std::uint64_t r = m.row_total(c);
    chance += r * m.col_total(c);
    if (r == 0) continue;
    s.per_class[c] = static_cast<double>(m.at(c, c)) / static_cast<double>(r);
    acc_sum += s.per_class[c];
    ++present;
  }
  const double t = static_cast<double>(total);
  s.oa = static_cast<double>(trace) / t;
  s.aa = acc_sum / static_cast<double>(present);
  const double po = s.oa, pe = static_cast<double>(chance) / (t * t);
  // pe == 1 only when truth and prediction put every pixel in one class.
  s.kappa = pe == 1.0 ? 1.0 : (po - pe) / (1.0 - pe);
  return s;
}

/// Labels are 1..classes (0 = unlabeled). Pixels with mask != 0 are scored.
inline Scores evaluate(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& truth,
                       const std::vector<std::uint8_t>& mask, std::size_t classes) {
  if (pred.size() != truth.size() || mask.size() != truth.size()) {
    throw std::invalid_argument("evaluate: prediction, truth, and mask sizes differ (" + std::to_string(pred.size()) +
                                ", " + std::to_string(truth.size()) + ", " + std::to_string(mask.size()) + ")");
  }
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask[i]) continue;
    if (truth[i] == 0 || truth[i] > classes) {
      throw std::invalid_argument("evaluate: masked pixel " + std::to_string(i) + " has truth label " +
                                  std::to_string(truth[i]) + " outside 1.." + std::to_string(classes));
    }
    if (pred[i] == 0 || pred[i] > classes) {
      throw std::invalid_argument("evaluate: pixel " + std::to_string(i) + " has predicted label " +
                                  std::to_string(pred[i]) + " outside 1.." + std::to_string(classes));
    }
    ++m.at(truth[i] - 1u, pred[i] - 1u);
  }
  if (m.total() == 0) throw std::invalid_argument("evaluate: the mask selects no pixels");
  return scores_from(m);
}

}  // namespace nnc
