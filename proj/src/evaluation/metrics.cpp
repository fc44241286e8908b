#include "prism/evaluation/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prism/common/csv.hpp"
#include "prism/common/log.hpp"
#include "prism/common/parallel.hpp"
#include "prism/common/rng.hpp"

namespace prism::eval {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::vector<double> descending_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo + 1;
    while (hi < n && values[order[hi]] == values[order[lo]]) ++hi;
    const double shared = 0.5 * static_cast<double>(lo + 1 + hi);  // mean of ranks lo+1 .. hi
    for (std::size_t k = lo; k < hi; ++k) ranks[order[k]] = shared;
    lo = hi;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return kNaN;
  const auto ra = descending_ranks(a), rb = descending_ranks(b);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0 || vb == 0) return kNaN;
  return cov / std::sqrt(va * vb);
}

ICSeries rank_ic(const std::vector<CrossSection>& days) {
  ICSeries out;
  for (const auto& day : days) {
    if (day.scores.size() != day.returns.size()) throw std::invalid_argument("rank_ic: length mismatch on " + day.date);
    std::vector<double> s, r;
    for (std::size_t i = 0; i < day.scores.size(); ++i) {
      if (std::isfinite(day.scores[i]) && std::isfinite(day.returns[i])) {
        s.push_back(day.scores[i]);
        r.push_back(day.returns[i]);
      }
    }
    const double ic = spearman(s, r);
    if (!std::isfinite(ic)) {
      log::warn("rank_ic: skipping " + day.date + " (" + std::to_string(s.size()) +
                " usable pairs, correlation undefined)");
      continue;
    }
    out.dates.push_back(day.date);
    out.values.push_back(ic);
    out.counts.push_back(s.size());
  }
  return out;
}

ICSummary summarize(const ICSeries& series) {
  ICSummary out;
  const auto& v = series.values;
  out.days = v.size();
  if (v.empty()) {
    out.mean = out.stddev = out.icir = kNaN;
    return out;
  }
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) {
    out.stddev = out.icir = kNaN;
    return out;
  }
  double ss = 0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  const bool constant = std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  out.stddev = constant ? 0.0 : std::sqrt(ss / static_cast<double>(v.size() - 1));
  if (out.stddev > 0) {
    out.icir = out.mean / out.stddev;
  } else if (out.mean != 0) {
    out.icir = std::copysign(std::numeric_limits<double>::infinity(), out.mean);
  } else {
    out.icir = kNaN;
  }
  return out;
}

double block_bootstrap_pvalue(std::span<const double> a, std::span<const double> b, std::size_t block_length,
                              std::size_t resamples, std::uint64_t seed) {
  if (a.size() != b.size()) throw std::invalid_argument("block_bootstrap_pvalue: length mismatch");
  const std::size_t n = a.size();
  if (n == 0 || resamples == 0) throw std::invalid_argument("block_bootstrap_pvalue: empty input");
  if (block_length == 0) throw std::invalid_argument("block_bootstrap_pvalue: block length must be >= 1");
  if (block_length > n) {
    log::warn("block_bootstrap_pvalue: block length " + std::to_string(block_length) + " shrunk to series length " +
              std::to_string(n));
    block_length = n;
  }
  std::vector<double> d(n);
  for (std::size_t t = 0; t < n; ++t) d[t] = a[t] - b[t];
  // Resamples run in fixed chunks, each with its own generator, so the
  // result does not depend on the worker count.
  constexpr std::size_t kChunk = 256;
  const std::size_t starts = n - block_length + 1;
  const std::size_t chunks = (resamples + kChunk - 1) / kChunk;
  std::vector<std::size_t> not_positive(chunks, 0);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng(seed * 0x9E3779B97F4A7C15ull + c);
    const std::size_t end = std::min(resamples, (c + 1) * kChunk);
    for (std::size_t r = c * kChunk; r < end; ++r) {
      double total = 0;
      std::size_t filled = 0;
      while (filled < n) {
        const std::size_t s = rng.index(starts);
        for (std::size_t k = 0; k < block_length && filled < n; ++k, ++filled) total += d[s + k];
      }
      if (total / static_cast<double>(n) <= 0) ++not_positive[c];
    }
  });
  std::size_t count = 0;
  for (auto v : not_positive) count += v;
  return static_cast<double>(count) / static_cast<double>(resamples);
}

void write_ic_metrics(const std::string& path, const ICSummary& summary) {
  csv::Writer w(path, {"metric", "value"});
  w.cell("rank_ic").cell(summary.mean).end_row();
  w.cell("rank_ic_std").cell(summary.stddev).end_row();
  w.cell("rank_icir").cell(summary.icir).end_row();
  w.cell("days").cell(summary.days).end_row();
  w.close();
}

void write_ic_series(const std::string& path, const ICSeries& series) {
  csv::Writer w(path, {"date", "rank_ic", "n"});
  for (std::size_t k = 0; k < series.values.size(); ++k) {
    w.cell(series.dates[k]).cell(series.values[k]).cell(series.counts[k]).end_row();
  }
  w.close();
}

}  // namespace prism::eval
