#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "teddy/core.hpp"
#include "teddy/data.hpp"
#include "teddy/io.hpp"
#include "teddy/masks.hpp"

namespace teddy {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index writes its
/// own slot, so results keep input order. The first exception is rethrown.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::clamp(jobs, 1, std::max(1, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

struct MaskProvider {
  Provenance kind = Provenance::OracleGT;
  std::filesystem::path ingest_dir;
  int quant_levels = 4;
  int min_area = 4;

  std::string describe() const {
    switch (kind) {
      case Provenance::Partitioner: return "partitioner";
      case Provenance::OracleGT: return "oracle";
      case Provenance::Ingested: return "ingest:" + ingest_dir.string();
    }
    return "oracle";
  }
};

// Accepts "partitioner", "oracle" or "ingest:<dir>".
inline MaskProvider parse_mask_provider(const std::string& s) {
  MaskProvider p;
  if (s == "partitioner") {
    p.kind = Provenance::Partitioner;
  } else if (s == "oracle") {
    p.kind = Provenance::OracleGT;
  } else if (s.rfind("ingest:", 0) == 0 && s.size() > 7) {
    p.kind = Provenance::Ingested;
    p.ingest_dir = s.substr(7);
  } else {
    throw ConfigError("unknown mask provider '" + s + "'");
  }
  return p;
}

/// One mask set per sample of ds, in sample order. The oracle reads the
/// step's ground truth, so it must run before any TrainingGuard is taken.
inline std::vector<BinaryMaskSet> provide_masks(const MaskProvider& p, const StepDataset& ds,
                                                int jobs = 1) {
  std::vector<BinaryMaskSet> out(ds.size());
  parallel_for(ds.size(), jobs, [&](int i) {
    const ScoreMap& px = ds.pixels(i);
    switch (p.kind) {
      case Provenance::Partitioner:
        out[i] = partition_components(px, p.quant_levels, p.min_area);
        break;
      case Provenance::OracleGT: out[i] = oracle_masks(ds.gt(i)); break;
      case Provenance::Ingested:
        out[i] = load_masks(p.ingest_dir / (ds.id(i) + ".tdym"), px.height(), px.width());
        break;
    }
  });
  return out;
}

}  // namespace teddy
