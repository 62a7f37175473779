#include "gabn/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace gabn {

namespace {

void check_pairs(std::span<const double> sims, const std::vector<bool>& same, const char* who) {
  if (sims.size() != same.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(sims.size()) + " similarities but " +
                     std::to_string(same.size()) + " labels");
  }
  if (sims.empty()) throw DomainError(std::string(who) + ": empty pair list");
}

// Best threshold and the number of correct decisions it yields. The
// threshold sits midway between the best observed value and the next lower
// one, which leaves the count unchanged and generalizes to held-out folds.
std::pair<double, std::size_t> sweep(std::span<const double> sims, const std::vector<bool>& same) {
  std::vector<std::size_t> order(sims.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return sims[a] > sims[b]; });
  std::size_t negatives = std::count(same.begin(), same.end(), false);
  // Threshold +inf: everything rejected.
  std::size_t tp = 0, fp = 0;
  std::size_t best = negatives;
  double best_t = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < order.size();) {
    const double t = sims[order[i]];
    while (i < order.size() && sims[order[i]] == t) {
      (same[order[i]] ? tp : fp)++;
      ++i;
    }
    const std::size_t correct = tp + (negatives - fp);
    if (correct > best) {
      best = correct;
      best_t = i < order.size() ? 0.5 * (t + sims[order[i]]) : t;
    }
  }
  return {best_t, best};
}

}  // namespace

double best_threshold_accuracy(std::span<const double> sims, const std::vector<bool>& same) {
  check_pairs(sims, same, "best_threshold_accuracy");
  return 100.0 * double(sweep(sims, same).second) / double(sims.size());
}

double kfold_accuracy(std::span<const double> sims, const std::vector<bool>& same,
                      std::size_t folds) {
  check_pairs(sims, same, "kfold_accuracy");
  if (folds < 2 || folds > sims.size()) {
    throw DomainError("kfold_accuracy: " + std::to_string(folds) + " folds for " +
                      std::to_string(sims.size()) + " pairs");
  }
  const std::size_t n = sims.size();
  double total = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
    std::vector<double> ts;
    std::vector<bool> tl;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < lo || i >= hi) {
        ts.push_back(sims[i]);
        tl.push_back(same[i]);
      }
    }
    const auto t = sweep(ts, tl).first;
    std::size_t correct = 0;
    for (std::size_t i = lo; i < hi; ++i) correct += (sims[i] >= t) == same[i];
    total += 100.0 * double(correct) / double(hi - lo);
  }
  return total / double(folds);
}

template <typename T>
double cosine_similarity(const Tensor<T>& emb, std::size_t a, std::size_t b) {
  if (emb.rank() != 2) throw ShapeError("cosine_similarity: embeddings must be [M, d]");
  const std::size_t d = emb.dim(1);
  if (a >= emb.dim(0) || b >= emb.dim(0)) {
    throw DomainError("cosine_similarity: pair references image outside the embedding table");
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < d; ++k) {
    const double x = emb[a * d + k], y = emb[b * d + k];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  const double denom = std::sqrt(na * nb);
  return denom > 0 ? dot / denom : 0.0;
}

template <typename T>
std::vector<double> verification_accuracy(const Tensor<T>& emb,
                                          std::span<const VerificationPair> pairs,
                                          std::size_t num_groups, VerificationOptions opts) {
  if (pairs.empty()) throw DomainError("verification_accuracy: empty pair list");
  std::vector<std::vector<double>> sims(num_groups);
  std::vector<std::vector<bool>> same(num_groups);
  for (const auto& p : pairs) {
    if (p.group < 0 || std::size_t(p.group) >= num_groups) {
      throw DomainError("verification_accuracy: pair group " + std::to_string(p.group) +
                        " outside [0, " + std::to_string(num_groups) + ")");
    }
    sims[p.group].push_back(cosine_similarity(emb, p.a, p.b));
    same[p.group].push_back(p.same);
  }
  std::vector<double> acc(num_groups);
  for (std::size_t g = 0; g < num_groups; ++g) {
    if (sims[g].empty()) {
      throw DomainError("verification_accuracy: group " + std::to_string(g) + " has no pairs");
    }
    acc[g] = opts.folds >= 2 ? kfold_accuracy(sims[g], same[g], opts.folds)
                             : best_threshold_accuracy(sims[g], same[g]);
  }
  return acc;
}

double fairness_std(std::span<const double> acc) {
  if (acc.size() < 2) throw DomainError("fairness_std: needs at least 2 groups");
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / double(acc.size());
  double ss = 0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  return std::sqrt(ss / double(acc.size() - 1));
}

double fairness_ser(std::span<const double> acc) {
  if (acc.size() < 2) throw DomainError("fairness_ser: needs at least 2 groups");
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (double a : acc) {
    if (a >= 100.0) throw DomainError("fairness_ser: a group has zero error rate");
    lo = std::min(lo, 100.0 - a);
    hi = std::max(hi, 100.0 - a);
  }
  return hi / lo;
}

FairnessReport make_fairness_report(std::vector<std::string> groups,
                                    std::vector<double> accuracies) {
  if (groups.size() != accuracies.size()) {
    throw ShapeError("fairness report: group names and accuracies differ in length");
  }
  FairnessReport r;
  r.groups = std::move(groups);
  r.accuracy = std::move(accuracies);
  r.average = std::accumulate(r.accuracy.begin(), r.accuracy.end(), 0.0) /
              double(r.accuracy.size());
  r.std = fairness_std(r.accuracy);
  if (std::all_of(r.accuracy.begin(), r.accuracy.end(), [](double a) { return a < 100.0; })) {
    r.ser = fairness_ser(r.accuracy);
  }
  return r;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_report_csv(const std::filesystem::path& path, const FairnessReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& g : r.groups) out << g << ',';
  out << "Avg,STD,SER\n";
  for (double a : r.accuracy) out << format_double(a) << ',';
  out << format_double(r.average) << ',' << format_double(r.std) << ','
      << (r.ser ? format_double(*r.ser) : "") << '\n';
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

FairnessReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string header, values;
  while (std::getline(in, header) && (header.empty() || header[0] == '#')) {
  }
  std::getline(in, values);
  for (auto* s : {&header, &values}) {
    if (!s->empty() && s->back() == '\r') s->pop_back();
  }
  const auto names = split_csv(header), cells = split_csv(values);
  if (names.empty() || names.size() != cells.size()) {
    throw IoError(path.string() + ": header and value line differ in column count");
  }
  std::vector<std::string> groups;
  std::vector<double> acc;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == "Avg" || names[i] == "STD" || names[i] == "SER") continue;
    double v = 0;
    const auto& c = cells[i];
    auto res = std::from_chars(c.data(), c.data() + c.size(), v);
    if (res.ec != std::errc() || res.ptr != c.data() + c.size()) {
      throw IoError(path.string() + ": bad accuracy '" + c + "' for group " + names[i]);
    }
    groups.push_back(names[i]);
    acc.push_back(v);
  }
  return make_fairness_report(std::move(groups), std::move(acc));
}

std::string format_report_table(const FairnessReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (const auto& g : r.groups) os << std::setw(10) << g;
  os << std::setw(10) << "Avg" << std::setw(10) << "STD" << std::setw(10) << "SER" << '\n';
  for (double a : r.accuracy) os << std::setw(10) << a;
  os << std::setw(10) << r.average << std::setw(10) << r.std;
  if (r.ser) {
    os << std::setw(10) << *r.ser;
  } else {
    os << std::setw(10) << "n/a";
  }
  os << '\n';
  return os.str();
}

void GroupConfidence::add(int group, double p_max) {
  if (group < 0 || std::size_t(group) >= count.size()) {
    throw DomainError("confidence: group " + std::to_string(group) + " out of range");
  }
  p_max_sum[group] += p_max;
  ++count[group];
}

double GroupConfidence::mean(std::size_t g) const {
  return count.at(g) ? p_max_sum[g] / double(count[g]) : std::numeric_limits<double>::quiet_NaN();
}

ConfidenceCurve confidence_curve(std::span<const std::vector<GroupConfidence>> epochs) {
  ConfidenceCurve curve;
  for (const auto& steps : epochs) {
    const std::size_t groups = steps.empty() ? 0 : steps.front().count.size();
    GroupConfidence pooled(groups);
    for (const auto& s : steps) {
      if (s.count.size() != groups) throw ShapeError("confidence_curve: group count changes");
      for (std::size_t g = 0; g < groups; ++g) {
        pooled.p_max_sum[g] += s.p_max_sum[g];
        pooled.count[g] += s.count[g];
      }
    }
    std::vector<double> means(groups);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t g = 0; g < groups; ++g) {
      means[g] = pooled.mean(g);
      if (pooled.count[g]) {
        lo = std::min(lo, means[g]);
        hi = std::max(hi, means[g]);
      }
    }
    curve.gap.push_back(hi >= lo ? hi - lo : 0.0);
    curve.mean.push_back(std::move(means));
  }
  return curve;
}

void write_confidence_csv(const std::filesystem::path& path, const ConfidenceCurve& curve,
                          std::span<const std::string> names) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch";
  for (const auto& n : names) out << ",mean_p_max_" << n;
  out << ",gap\n";
  for (std::size_t e = 0; e < curve.mean.size(); ++e) {
    out << e;
    for (double v : curve.mean[e]) out << ',' << format_double(v);
    out << ',' << format_double(curve.gap[e]) << '\n';
  }
}

template double cosine_similarity(const Tensor<float>&, std::size_t, std::size_t);
template double cosine_similarity(const Tensor<double>&, std::size_t, std::size_t);
template std::vector<double> verification_accuracy(const Tensor<float>&,
                                                   std::span<const VerificationPair>, std::size_t,
                                                   VerificationOptions);
template std::vector<double> verification_accuracy(const Tensor<double>&,
                                                   std::span<const VerificationPair>, std::size_t,
                                                   VerificationOptions);

}  // namespace gabn
