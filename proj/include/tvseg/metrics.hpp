#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/postproc.hpp"

namespace tvseg {

struct VoxelMetrics {
  double sens = 0.0;
  double prec = 0.0;
  double dice = 0.0;
};

/// Voxel-level sensitivity, precision and Dice. Conventions: both masks empty
/// gives all ones (nothing to find, nothing found wrongly); any other zero
/// denominator gives 0 for that metric.
inline VoxelMetrics voxel_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  const OverlapCounts c = count_overlap(pred, gt);
  VoxelMetrics m;
  if (c.tp + c.fp + c.fn == 0) {
    m.sens = m.prec = m.dice = 1.0;
    return m;
  }
  m.sens = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  m.prec = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  m.dice = (2 * c.tp + c.fp + c.fn) > 0
               ? 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn)
               : 0.0;
  return m;
}

/// Subject counts as detected iff some voxel is predicted and true. Two empty
/// masks are NOT a detection: no true positive voxel exists.
inline bool subject_detected(const BinaryMask& pred, const BinaryMask& gt) {
  return count_overlap(pred, gt).tp > 0;
}

/// Number of predicted 26-connectivity clusters sharing no voxel with gt.
inline int64_t count_fp_clusters(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.shape() != gt.shape())
    throw InvalidArgument("count_fp_clusters shape mismatch");
  const LabelMap lm = label_components(pred);
  if (lm.num_clusters == 0) return 0;
  std::vector<uint8_t> touches(static_cast<size_t>(lm.num_clusters) + 1, 0);
  for (size_t i = 0; i < lm.labels.size(); ++i)
    if (lm.labels[i] && gt.data()[i]) touches[static_cast<size_t>(lm.labels[i])] = 1;
  int64_t fp = 0;
  for (int32_t l = 1; l <= lm.num_clusters; ++l)
    if (!touches[static_cast<size_t>(l)]) ++fp;
  return fp;
}

struct SubjectMetrics {
  double sens = 0.0;
  double prec = 0.0;
  double dice = 0.0;
  bool detected = false;
  int64_t n_fp_clusters = 0;
};

inline SubjectMetrics evaluate_subject(const BinaryMask& pred, const BinaryMask& gt) {
  SubjectMetrics sm;
  const VoxelMetrics vm = voxel_metrics(pred, gt);
  sm.sens = vm.sens;
  sm.prec = vm.prec;
  sm.dice = vm.dice;
  sm.detected = subject_detected(pred, gt);
  sm.n_fp_clusters = count_fp_clusters(pred, gt);
  return sm;
}

struct MetricStat {
  double mean = 0.0;
  double stddev = 0.0;  // population std over runs
};

/// One row of the results table: per-metric mean +/- std across runs of the
/// run-level values (run-level value = mean over that run's subjects).
struct AggregateReport {
  std::string label;
  int64_t runs = 0;
  int64_t subjects_per_run = 0;
  MetricStat sens, prec, dice, ssens, nfpc;
};

/// Run-level summary of one run's subjects.
struct RunMetrics {
  double sens = 0.0, prec = 0.0, dice = 0.0, ssens = 0.0, nfpc = 0.0;
};

inline RunMetrics summarize_run(const std::vector<SubjectMetrics>& subjects) {
  if (subjects.empty()) throw InvalidArgument("summarize_run: no subjects");
  RunMetrics r;
  for (auto& s : subjects) {
    r.sens += s.sens;
    r.prec += s.prec;
    r.dice += s.dice;
    r.ssens += s.detected ? 1.0 : 0.0;
    r.nfpc += static_cast<double>(s.n_fp_clusters);
  }
  const double n = static_cast<double>(subjects.size());
  r.sens /= n;
  r.prec /= n;
  r.dice /= n;
  r.ssens /= n;
  r.nfpc /= n;
  return r;
}

namespace detail {
inline MetricStat mean_std(const std::vector<double>& xs) {
  MetricStat st;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) st.mean += x;
  st.mean /= n;
  double acc = 0.0;
  for (double x : xs) acc += (x - st.mean) * (x - st.mean);
  st.stddev = std::sqrt(acc / n);
  return st;
}
}  // namespace detail

/// `flat` holds runs*subjects_per_run entries grouped by run in order.
inline AggregateReport aggregate(const std::vector<SubjectMetrics>& flat, int64_t runs,
                                 const std::string& label = "") {
  if (runs < 1) throw InvalidArgument("aggregate: runs must be >= 1");
  if (flat.empty() || static_cast<int64_t>(flat.size()) % runs != 0)
    throw InvalidArgument("aggregate: subject list size must be a positive multiple of runs");
  const int64_t per_run = static_cast<int64_t>(flat.size()) / runs;

  std::vector<double> sens, prec, dice, ssens, nfpc;
  for (int64_t r = 0; r < runs; ++r) {
    std::vector<SubjectMetrics> run(flat.begin() + r * per_run, flat.begin() + (r + 1) * per_run);
    const RunMetrics rm = summarize_run(run);
    sens.push_back(rm.sens);
    prec.push_back(rm.prec);
    dice.push_back(rm.dice);
    ssens.push_back(rm.ssens);
    nfpc.push_back(rm.nfpc);
  }
  AggregateReport rep;
  rep.label = label;
  rep.runs = runs;
  rep.subjects_per_run = per_run;
  rep.sens = detail::mean_std(sens);
  rep.prec = detail::mean_std(prec);
  rep.dice = detail::mean_std(dice);
  rep.ssens = detail::mean_std(ssens);
  rep.nfpc = detail::mean_std(nfpc);
  return rep;
}

}  // namespace tvseg
