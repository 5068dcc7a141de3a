#include <algorithm>
#include <chrono>
#include <cmath>

#include "ch4/attention/attention.hpp"
#include "ch4/h3/h3.hpp"
#include "doctest.h"
#include "unit/test_util.hpp"

using namespace ch4;
using ch4::testing::random_tensor;

namespace {

template <class F>
double median_seconds(F&& f, int repeats) {
  std::vector<double> times;
  f();
  for (int r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

// Least-squares slope of log(time) against log(L).
double log_log_slope(const std::vector<double>& lengths, const std::vector<double>& times) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) mx += std::log(lengths[i]), my += std::log(times[i]);
  mx /= lengths.size(), my /= lengths.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double dx = std::log(lengths[i]) - mx;
    sxy += dx * (std::log(times[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace

TEST_CASE("H3 forward time grows near-linearly, causal MHSA quadratically") {
  std::mt19937_64 rng(11);
  const H3Layer h3 = H3Layer::random({8, 2}, rng);
  const MhsaLayer mhsa = MhsaLayer::random(8, 2, rng);
  std::vector<double> lengths, h3_times, mhsa_times;
  for (std::size_t L : {256u, 512u, 1024u, 2048u, 4096u}) {
    const Tensor x = random_tensor({L, 8}, rng);
    lengths.push_back(static_cast<double>(L));
    h3_times.push_back(median_seconds([&] { h3_forward(h3, x); }, 5));
    mhsa_times.push_back(median_seconds([&] { mhsa_forward(mhsa, x, AttentionMode::causal); }, 3));
  }
  const double h3_slope = log_log_slope(lengths, h3_times);
  const double mhsa_slope = log_log_slope(lengths, mhsa_times);
  MESSAGE("H3 slope " << h3_slope << ", MHSA slope " << mhsa_slope);
  CHECK(h3_slope <= 1.25);
  CHECK(mhsa_slope >= 1.7);
}

TEST_CASE("H3 streaming step cost does not depend on position") {
  std::mt19937_64 rng(12);
  const H3Layer layer = H3Layer::random({16, 2}, rng);
  const Tensor x = random_tensor({1000, 16}, rng);
  H3StreamState early_state = make_stream_state(layer);
  for (std::size_t t = 0; t < 10; ++t) h3_step(layer, early_state, x.row(t));
  H3StreamState late_state = early_state;
  for (std::size_t t = 10; t < 999; ++t) h3_step(layer, late_state, x.row(t));
  // Batches of steps from identical states at t = 10 and t = 999, alternated so machine drift hits both.
  auto batch = [&](const H3StreamState& state, std::size_t t) {
    const auto start = std::chrono::steady_clock::now();
    for (int r = 0; r < 200; ++r) {
      H3StreamState s = state;
      h3_step(layer, s, x.row(t));
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  batch(early_state, 10), batch(late_state, 999);
  std::vector<double> early_times, late_times;
  for (int r = 0; r < 31; ++r) {
    early_times.push_back(batch(early_state, 10));
    late_times.push_back(batch(late_state, 999));
  }
  std::sort(early_times.begin(), early_times.end());
  std::sort(late_times.begin(), late_times.end());
  const double early = early_times[early_times.size() / 2];
  const double late = late_times[late_times.size() / 2];
  MESSAGE("step time t=10 " << early << " s, t=1000 " << late << " s");
  CHECK(std::abs(late - early) / early < 0.2);
}
