#include "affect/bench.hpp"

#include <chrono>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace affect::bench {

BenchReport BenchReport::from_latencies(std::vector<double> latencies_ms) {
  if (latencies_ms.empty()) throw std::invalid_argument("bench: no runs");
  BenchReport r;
  r.latencies_ms = std::move(latencies_ms);
  r.mean_ms = std::accumulate(r.latencies_ms.begin(), r.latencies_ms.end(), 0.0) / double(r.latencies_ms.size());
  if (!(r.mean_ms > 0.0)) throw std::invalid_argument("bench: mean latency must be positive");
  r.fps = 1000.0 / r.mean_ms;
  return r;
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "runs:    " << latencies_ms.size() << "\nruns_ms:";
  for (double l : latencies_ms) os << " " << l;
  os << "\nmean_ms: " << mean_ms;
  os.precision(1);
  os << "\nfps:     " << fps << "\n";
  return os.str();
}

std::string BenchReport::to_json() const {
  return nlohmann::ordered_json{{"runs", latencies_ms.size()},
                                {"latencies_ms", latencies_ms},
                                {"mean_ms", mean_ms},
                                {"fps", fps}}
      .dump();
}

BenchReport run(const arch::AffectModel& model, const Tensor& input, std::size_t runs) {
  if (runs == 0) throw std::invalid_argument("bench: runs must be >= 1");
  const Tensor batch = arch::as_model_batch(input);
  model.predict(batch);
  std::vector<double> lat;
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor out = model.predict(batch);
    const auto t1 = std::chrono::steady_clock::now();
    if (out.size() == 0) throw std::logic_error("bench: empty model output");
    lat.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return BenchReport::from_latencies(std::move(lat));
}

}  // namespace affect::bench
