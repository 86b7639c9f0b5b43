#include <gtest/gtest.h>

#include "otakey/faultsweep.hpp"

using namespace otakey;
using namespace otakey::faultsweep;
using testbed::Flow;

namespace {

void expect_clean(const SweepReport& r) {
  for (const auto& v : r.violations) ADD_FAILURE() << v.cut.describe() << ": " << v.reason;
  EXPECT_TRUE(r.ok());
}

}  // namespace

TEST(FaultSweep, AkInitEveryWord) {
  auto r = faultsweep::faultsweep(Flow::AkInit);
  expect_clean(r);
  EXPECT_GT(r.cut_points, 30u);
}

TEST(FaultSweep, AkRotateEveryWord) {
  auto r = faultsweep::faultsweep(Flow::AkRotate);
  expect_clean(r);
  ASSERT_EQ(r.variants.size(), 2u);
}

TEST(FaultSweep, CkUpdateEveryWord) {
  auto r = faultsweep::faultsweep(Flow::CkUpdate);
  expect_clean(r);
  EXPECT_EQ(r.variants.size(), 4u);
  // Maximal connection info means more words to program, so more cuts.
  std::uint64_t short_ops = 0, long_ops = 0;
  for (const auto& v : r.variants) {
    if (v.name == "ck-update/initial") short_ops = v.flash_ops;
    if (v.name == "ck-update/initial-512") long_ops = v.flash_ops;
  }
  EXPECT_GT(long_ops, short_ops);
}

TEST(FaultSweep, AllFlowsCoverAtLeastFiveHundredCuts) {
  auto r = faultsweep_all();
  expect_clean(r);
  EXPECT_GE(r.cut_points, 500u);
  auto j = r.to_json();
  EXPECT_EQ(j.at("cut_points").get<std::size_t>(), r.cut_points);
  EXPECT_TRUE(j.at("violations").empty());
}

TEST(FaultSweep, OpGranularityIsASubset) {
  auto coarse = faultsweep_all(Granularity::Op);
  auto fine = faultsweep_all(Granularity::Word);
  expect_clean(coarse);
  EXPECT_LT(coarse.cut_points, fine.cut_points);
}
