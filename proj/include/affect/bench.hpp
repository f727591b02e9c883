#pragma once

#include <string>
#include <vector>

#include "affect/architectures.hpp"
#include "affect/tensor.hpp"

namespace affect::bench {

struct BenchReport {
  std::vector<double> latencies_ms;
  double mean_ms = 0.0;
  double fps = 0.0;  // 1000 / mean_ms

  static BenchReport from_latencies(std::vector<double> latencies_ms);
  std::string to_text() const;
  std::string to_json() const;
};

/// One untimed warm-up pass, then `runs` timed single-image inferences of an
/// already preprocessed [128,128,3] input.
BenchReport run(const arch::AffectModel& model, const Tensor& input, std::size_t runs = 10);

}  // namespace affect::bench
